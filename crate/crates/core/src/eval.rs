//! Accuracy reporting and the impact of lane changes on the target-lane
//! follower.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::labeling::{Label, Provenance};
use crate::trajectory::{Recording, Role, TrajectoryError, VehicleId};

/// Cumulative speed-change thresholds, in percent.
pub const SPEED_CHANGE_THRESHOLDS: [f64; 4] = [0.0, -1.0, -2.0, -3.0];

const EMPTY_CELL: &str = "-";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions for {actuals} labels")]
    LengthMismatch { predictions: usize, actuals: usize },
    #[error("start speed must be positive, got {0}")]
    NonPositiveStartSpeed(f64),
    #[error("no trajectory for vehicle {vehicle} at frame {frame} in recording {recording}")]
    MissingTrajectory {
        recording: u32,
        vehicle: VehicleId,
        frame: u32,
    },
    #[error("recording {0} not loaded")]
    MissingRecording(u32),
    #[error("lane-change case of vehicle {0} carries no event frames")]
    MissingEvent(VehicleId),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Rows are actual classes, columns predicted, both in label order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

pub fn confusion(predictions: &[Label], actuals: &[Label]) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != actuals.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            actuals: actuals.len(),
        });
    }
    let mut m = ConfusionMatrix::default();
    for (p, a) in predictions.iter().zip(actuals) {
        m.counts[a.index()][p.index()] += 1;
    }
    Ok(m)
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, actual: Label) -> u64 {
        self.counts[actual.index()].iter().sum()
    }

    /// Fraction in [0, 1]; `None` for an empty matrix.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.correct() as f64 / t as f64)
    }

    pub fn class_accuracy(&self, actual: Label) -> Option<f64> {
        let t = self.row_total(actual);
        (t > 0).then(|| self.counts[actual.index()][actual.index()] as f64 / t as f64)
    }

    /// Row as percentages of the actual class.
    pub fn row_percentages(&self, actual: Label) -> Option<[f64; 3]> {
        let t = self.row_total(actual);
        (t > 0).then(|| self.counts[actual.index()].map(|c| 100.0 * c as f64 / t as f64))
    }
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}%"),
        None => EMPTY_CELL.to_string(),
    }
}

fn class_title(label: Label) -> &'static str {
    match label {
        Label::Keep => "Keep",
        Label::Left => "Left",
        Label::Right => "Right",
    }
}

fn csv_num(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// Aligned text table with one block of class rows per model.
pub fn comparison_table(rows: &[(&str, &ConfusionMatrix)]) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _)| n.chars().count())
        .chain(["Model".len()])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:<14}  {:>8}  {:>8}  {:>8}  {:>8}",
        "Model", "Real\\Predict", "Keep", "Left", "Right", "Overall"
    );
    for (name, m) in rows {
        for label in Label::ALL {
            let cells: Vec<String> = match m.row_percentages(label) {
                Some(p) => p.iter().map(|&v| pct(Some(v))).collect(),
                None => vec![EMPTY_CELL.to_string(); 3],
            };
            let first = label == Label::Keep;
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<14}  {:>8}  {:>8}  {:>8}  {:>8}",
                if first { name } else { "" },
                class_title(label),
                cells[0],
                cells[1],
                cells[2],
                if first { pct(m.overall_accuracy().map(|a| 100.0 * a)) } else { String::new() }
            );
        }
    }
    out
}

pub fn comparison_csv(rows: &[(&str, &ConfusionMatrix)]) -> String {
    let mut out = String::from(
        "model,actual,count_keep,count_left,count_right,pct_keep,pct_left,pct_right,overall_accuracy_pct\n",
    );
    for (name, m) in rows {
        let overall = csv_num(m.overall_accuracy().map(|a| 100.0 * a));
        for label in Label::ALL {
            let c = m.counts[label.index()];
            let p = m.row_percentages(label);
            let cell = |i: usize| csv_num(p.map(|p| p[i]));
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{overall}",
                label.name(),
                c[0],
                c[1],
                c[2],
                cell(0),
                cell(1),
                cell(2)
            );
        }
    }
    out
}

/// Signed percentage change from `v_start` to `v_end`.
pub fn speed_change_rate(v_start: f64, v_end: f64) -> Result<f64, EvalError> {
    if !(v_start > 0.0) {
        return Err(EvalError::NonPositiveStartSpeed(v_start));
    }
    Ok((v_end - v_start) / v_start * 100.0)
}

/// Time to collision of a follower with its leader; positive on a closing
/// course. `None` when the speeds are equal.
pub fn ttc(x_l: f64, x_f: f64, v_l: f64, v_f: f64) -> Option<f64> {
    let closing = v_f - v_l;
    (closing != 0.0).then(|| (x_l - x_f) / closing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SafetyImpact {
    Positive,
    Negative,
    None,
}

impl SafetyImpact {
    pub const ALL: [SafetyImpact; 3] = [SafetyImpact::Positive, SafetyImpact::Negative, SafetyImpact::None];

    pub fn index(self) -> usize {
        match self {
            SafetyImpact::Positive => 0,
            SafetyImpact::Negative => 1,
            SafetyImpact::None => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SafetyImpact::Positive => "Positive",
            SafetyImpact::Negative => "Negative",
            SafetyImpact::None => "None",
        }
    }
}

/// Classify the change of the follower's TTC. Absent TTCs are passed as 0.
pub fn safety_impact(ttc_start: f64, ttc_end: f64) -> SafetyImpact {
    if ttc_start > 0.0 {
        if ttc_end > 0.0 {
            let d = ttc_end - ttc_start;
            if d > 0.0 {
                SafetyImpact::Positive
            } else if d < 0.0 {
                SafetyImpact::Negative
            } else {
                SafetyImpact::None
            }
        } else if ttc_end < 0.0 {
            SafetyImpact::Positive
        } else {
            SafetyImpact::None
        }
    } else if ttc_end > 0.0 {
        SafetyImpact::Negative
    } else {
        SafetyImpact::None
    }
}

/// Prediction outcome with lane keep as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrant {
    TP,
    FP,
    FN,
    TN,
}

impl Quadrant {
    pub fn of(predicted: Label, actual: Label) -> Self {
        match (predicted.is_change(), actual.is_change()) {
            (false, false) => Quadrant::TP,
            (false, true) => Quadrant::FP,
            (true, false) => Quadrant::FN,
            (true, true) => Quadrant::TN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TP => "TP",
            Quadrant::FP => "FP",
            Quadrant::FN => "FN",
            Quadrant::TN => "TN",
        }
    }
}

/// One lane-change case seen from the follower in its target lane.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactRecord {
    pub provenance: Provenance,
    pub predicted: Label,
    pub actual: Label,
    pub quadrant: Quadrant,
    /// `None` when the target lane had no follower at onset.
    pub follower: Option<VehicleId>,
    pub v_start: Option<f64>,
    pub v_end: Option<f64>,
    pub ttc_start: Option<f64>,
    pub ttc_end: Option<f64>,
}

impl ImpactRecord {
    pub fn speed_change(&self) -> Option<Result<f64, EvalError>> {
        Some(speed_change_rate(self.v_start?, self.v_end?))
    }

    pub fn safety(&self) -> Option<SafetyImpact> {
        self.follower?;
        Some(safety_impact(self.ttc_start.unwrap_or(0.0), self.ttc_end.unwrap_or(0.0)))
    }
}

/// Percentages over the cases of one quadrant that had a follower.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartitionImpact {
    pub with_follower: usize,
    pub no_follower: usize,
    /// Share with speed-change rate at or below each threshold.
    pub speed_le: Option<[f64; 4]>,
    /// Positive, Negative, None.
    pub safety: Option<[f64; 3]>,
}

impl PartitionImpact {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ImpactRecord>) -> Result<Self, EvalError> {
        let mut p = PartitionImpact::default();
        let mut speed = [0usize; 4];
        let mut safety = [0usize; 3];
        for r in records {
            if r.follower.is_none() {
                p.no_follower += 1;
                continue;
            }
            p.with_follower += 1;
            if let Some(rate) = r.speed_change() {
                let rate = rate?;
                for (k, t) in SPEED_CHANGE_THRESHOLDS.iter().enumerate() {
                    if rate <= *t {
                        speed[k] += 1;
                    }
                }
            }
            if let Some(s) = r.safety() {
                safety[s.index()] += 1;
            }
        }
        if p.with_follower > 0 {
            let n = p.with_follower as f64;
            p.speed_le = Some(speed.map(|c| 100.0 * c as f64 / n));
            p.safety = Some(safety.map(|c| 100.0 * c as f64 / n));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactReport {
    pub records: Vec<ImpactRecord>,
    pub tn: PartitionImpact,
    pub fp: PartitionImpact,
}

/// A prediction for one case.
#[derive(Debug, Clone, Copy)]
pub struct PredictedCase<'a> {
    pub provenance: &'a Provenance,
    pub actual: Label,
    pub predicted: Label,
}

fn follower_state(
    rec: &Recording,
    follower: VehicleId,
    frame: u32,
) -> Result<(f64, Option<f64>), EvalError> {
    let missing = EvalError::MissingTrajectory {
        recording: rec.id,
        vehicle: follower,
        frame,
    };
    let f = rec.frame_of(follower, frame).map_err(|_| missing)?;
    let leader = rec
        .neighbors(follower, frame)?
        .get(Role::P)
        .and_then(|id| rec.frame_of(id, frame).ok());
    let t = leader.and_then(|l| ttc(l.x, f.x, l.vx, f.vx));
    Ok((f.vx, t))
}

/// Follower speed and TTC at onset and completion of every actual lane change.
pub fn impact_report(
    predictions: &[PredictedCase<'_>],
    recordings: &BTreeMap<u32, Recording>,
) -> Result<ImpactReport, EvalError> {
    let mut records = Vec::new();
    for p in predictions.iter().filter(|p| p.actual.is_change()) {
        let prov = p.provenance;
        let rec = recordings
            .get(&prov.recording_id)
            .ok_or(EvalError::MissingRecording(prov.recording_id))?;
        let ev = prov.event.ok_or(EvalError::MissingEvent(prov.vehicle_id))?;
        let role = if p.actual == Label::Left { Role::FL } else { Role::FR };
        let follower = rec.neighbors(prov.vehicle_id, ev.t_start)?.get(role);
        let mut r = ImpactRecord {
            provenance: *prov,
            predicted: p.predicted,
            actual: p.actual,
            quadrant: Quadrant::of(p.predicted, p.actual),
            follower,
            v_start: None,
            v_end: None,
            ttc_start: None,
            ttc_end: None,
        };
        if let Some(f) = follower {
            let (v0, t0) = follower_state(rec, f, ev.t_start)?;
            let (v1, t1) = follower_state(rec, f, ev.t_end)?;
            r.v_start = Some(v0);
            r.v_end = Some(v1);
            r.ttc_start = t0;
            r.ttc_end = t1;
        }
        records.push(r);
    }
    let part = |q: Quadrant| PartitionImpact::from_records(records.iter().filter(|r| r.quadrant == q));
    Ok(ImpactReport {
        tn: part(Quadrant::TN)?,
        fp: part(Quadrant::FP)?,
        records,
    })
}

impl ImpactReport {
    fn partitions(&self) -> [(&'static str, &PartitionImpact); 2] {
        [("TN", &self.tn), ("FP", &self.fp)]
    }

    pub fn speed_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24}  {:>8}  {:>8}  {:>8}  {:>8}  {:>11}",
            "Speed Change Rate", "0", "-1%", "-2%", "-3%", "no follower"
        );
        for (name, p) in self.partitions() {
            let cells: Vec<String> = match p.speed_le {
                Some(v) => v.iter().map(|&x| pct(Some(x))).collect(),
                None => vec![EMPTY_CELL.to_string(); 4],
            };
            let _ = writeln!(
                out,
                "{:<24}  {:>8}  {:>8}  {:>8}  {:>8}  {:>11}",
                format!("Percentage in {name} cases"),
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                p.no_follower
            );
        }
        out
    }

    pub fn safety_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24}  {:>8}  {:>8}  {:>8}  {:>11}",
            "Safety Impact", "Positive", "Negative", "None", "no follower"
        );
        for (name, p) in self.partitions() {
            let cells: Vec<String> = match p.safety {
                Some(v) => v.iter().map(|&x| pct(Some(x))).collect(),
                None => vec![EMPTY_CELL.to_string(); 3],
            };
            let _ = writeln!(
                out,
                "{:<24}  {:>8}  {:>8}  {:>8}  {:>11}",
                format!("Percentage in {name} cases"),
                cells[0],
                cells[1],
                cells[2],
                p.no_follower
            );
        }
        out
    }

    pub fn speed_csv(&self) -> String {
        let mut out = String::from("partition,cases,no_follower,le_0,le_minus1,le_minus2,le_minus3\n");
        for (name, p) in self.partitions() {
            let v = p.speed_le;
            let cell = |i: usize| csv_num(v.map(|v| v[i]));
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{}",
                p.with_follower,
                p.no_follower,
                cell(0),
                cell(1),
                cell(2),
                cell(3)
            );
        }
        out
    }

    pub fn safety_csv(&self) -> String {
        let mut out = String::from("partition,cases,no_follower,positive,negative,none\n");
        for (name, p) in self.partitions() {
            let v = p.safety;
            let cell = |i: usize| csv_num(v.map(|v| v[i]));
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{}",
                p.with_follower,
                p.no_follower,
                cell(0),
                cell(1),
                cell(2)
            );
        }
        out
    }

    /// One line per lane-change case.
    pub fn records_csv(&self) -> String {
        let mut out = String::from(
            "recording_id,vehicle_id,decision_frame,actual,predicted,quadrant,follower_id,v_start,v_end,speed_change_pct,ttc_start,ttc_end,safety_impact\n",
        );
        let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        for r in &self.records {
            let rate = r.speed_change().and_then(|x| x.ok());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.provenance.recording_id,
                r.provenance.vehicle_id,
                r.provenance.decision_frame,
                r.actual.name(),
                r.predicted.name(),
                r.quadrant.name(),
                r.follower.map(|f| f.to_string()).unwrap_or_default(),
                opt(r.v_start),
                opt(r.v_end),
                opt(rate),
                opt(r.ttc_start),
                opt(r.ttc_end),
                r.safety().map(|s| s.name()).unwrap_or("")
            );
        }
        out
    }
}
