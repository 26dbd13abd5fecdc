//! Lane-change detection, lane-keep sampling, and balanced train/test splits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{assemble_case, FeatureBundle, FeatureError, BUNDLE_LEN, DEFAULT_SAFE_HEADWAY_S};
use crate::trajectory::{frames_for, LaneId, Recording, TrajectoryError, VehicleId, VehicleTrack, HISTORY_WINDOW_S};

pub const DEFAULT_T_REACT_S: f64 = 1.0;
/// Lateral speed toward the target lane that marks an ongoing maneuver.
pub const ONSET_LATERAL_SPEED: f64 = 0.10;
pub const MIN_STAY_S: f64 = 12.0;
pub const DEFAULT_STRIDE_S: f64 = 2.0;
pub const DEFAULT_DUP_FACTOR: usize = 16;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

pub const CASE_MAGIC: &[u8; 8] = b"DSADLC-C";
pub const CASE_FORMAT_VERSION: u32 = 1;
const NO_FRAME: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid labeling config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed case file: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChangeDirection {
    Left,
    Right,
}

impl ChangeDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ChangeDirection::Left => "left",
            ChangeDirection::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(ChangeDirection::Left),
            "right" => Some(ChangeDirection::Right),
            _ => None,
        }
    }

    /// +1 for left (positive y), -1 for right.
    pub fn sign(self) -> f64 {
        match self {
            ChangeDirection::Left => 1.0,
            ChangeDirection::Right => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneChangeEvent {
    pub vehicle_id: VehicleId,
    pub t_decision: u32,
    pub t_start: u32,
    pub t_cross: u32,
    pub t_end: u32,
    pub direction: ChangeDirection,
    pub from_lane: LaneId,
    pub to_lane: LaneId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Keep = 0,
    Left = 1,
    Right = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Keep, Label::Left, Label::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Keep => "keep",
            Label::Left => "left",
            Label::Right => "right",
        }
    }

    pub fn is_change(self) -> bool {
        self != Label::Keep
    }
}

impl From<ChangeDirection> for Label {
    fn from(d: ChangeDirection) -> Self {
        match d {
            ChangeDirection::Left => Label::Left,
            ChangeDirection::Right => Label::Right,
        }
    }
}

/// Maneuver frames carried by lane-change cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventFrames {
    pub t_start: u32,
    pub t_cross: u32,
    pub t_end: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub recording_id: u32,
    pub vehicle_id: VehicleId,
    pub decision_frame: u32,
    pub event: Option<EventFrames>,
}

impl Provenance {
    pub fn key(&self) -> (u32, VehicleId, u32) {
        (self.recording_id, self.vehicle_id, self.decision_frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub bundle: Arc<FeatureBundle>,
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingConfig {
    pub t_react_s: f64,
    pub t_h: f64,
    pub min_stay_s: f64,
    pub stride_s: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            t_react_s: DEFAULT_T_REACT_S,
            t_h: DEFAULT_SAFE_HEADWAY_S,
            min_stay_s: MIN_STAY_S,
            stride_s: DEFAULT_STRIDE_S,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self, frame_rate: f64) -> Result<(), LabelingError> {
        if !(self.t_react_s > 0.0) || frames_for(self.t_react_s, frame_rate) == 0 {
            return Err(LabelingError::Config(format!(
                "t_react {} s is shorter than one frame",
                self.t_react_s
            )));
        }
        if !(self.t_h > 0.0) {
            return Err(LabelingError::Config(format!("t_h must be positive, got {}", self.t_h)));
        }
        if !(self.min_stay_s >= 0.0) {
            return Err(LabelingError::Config("min_stay_s must be non-negative".into()));
        }
        if !(self.stride_s > 0.0) || frames_for(self.stride_s, frame_rate) == 0 {
            return Err(LabelingError::Config(format!(
                "stride {} s is shorter than one frame",
                self.stride_s
            )));
        }
        Ok(())
    }
}

fn has_history(track: &VehicleTrack, frame: u32, frame_rate: f64) -> bool {
    track.window(frame, HISTORY_WINDOW_S, frame_rate).is_ok()
}

/// Every lane change in `track`, with onset and completion found from lateral speed.
pub fn detect_lane_changes(
    track: &VehicleTrack,
    recording: &Recording,
    t_react_s: f64,
) -> Vec<LaneChangeEvent> {
    let fps = recording.frame_rate;
    let react = frames_for(t_react_s, fps) as u32;
    let f = &track.frames;
    let mut events = Vec::new();
    for i in 1..f.len() {
        let (from, to) = (f[i - 1].lane_id, f[i].lane_id);
        if from == to {
            continue;
        }
        let (Some(a), Some(b)) = (recording.lane(from), recording.lane(to)) else {
            continue;
        };
        let direction = if b.rank > a.rank {
            ChangeDirection::Left
        } else {
            ChangeDirection::Right
        };
        let toward = |k: usize| direction.sign() * f[k].vy > ONSET_LATERAL_SPEED;
        let mut s = i;
        while s > 0 && toward(s - 1) {
            s -= 1;
        }
        let mut e = i;
        while e + 1 < f.len() && toward(e + 1) {
            e += 1;
        }
        let t_start = f[s].frame;
        let Some(t_decision) = t_start.checked_sub(react) else {
            continue;
        };
        if !has_history(track, t_decision, fps) {
            continue;
        }
        events.push(LaneChangeEvent {
            vehicle_id: track.id,
            t_decision,
            t_start,
            t_cross: f[i].frame,
            t_end: f[e].frame,
            direction,
            from_lane: from,
            to_lane: to,
        });
    }
    events
}

/// Drop mandatory changes, i.e. those leaving a merge lane.
pub fn filter_mlc(events: Vec<LaneChangeEvent>, recording: &Recording) -> Vec<LaneChangeEvent> {
    events
        .into_iter()
        .filter(|e| !recording.lane(e.from_lane).is_some_and(|l| l.merge))
        .collect()
}

/// Lane-keep decision frames for one track.
///
/// A segment is a maximal run of one lane lasting at least `min_stay_s`.
/// Decision frames sit every `stride_s` after the segment start. Frames whose
/// history window reaches back into a preceding maneuver, or that fall at or
/// after the decision moment of the change closing the segment, are skipped.
pub fn lane_keep_frames(
    track: &VehicleTrack,
    recording: &Recording,
    events: &[LaneChangeEvent],
    config: &LabelingConfig,
) -> Vec<u32> {
    let fps = recording.frame_rate;
    let min_len = frames_for(config.min_stay_s, fps);
    let stride = frames_for(config.stride_s, fps).max(1) as u32;
    let hist = frames_for(HISTORY_WINDOW_S, fps) as u32;
    let f = &track.frames;
    let mut out = Vec::new();
    let mut seg_start = 0;
    while seg_start < f.len() {
        let lane = f[seg_start].lane_id;
        let mut seg_end = seg_start;
        while seg_end + 1 < f.len() && f[seg_end + 1].lane_id == lane {
            seg_end += 1;
        }
        let (first, last) = (f[seg_start].frame, f[seg_end].frame);
        let merge = recording.lane(lane).is_some_and(|l| l.merge);
        if seg_end - seg_start + 1 >= min_len && !merge {
            let after_prev = events
                .iter()
                .filter(|e| e.t_cross <= first)
                .map(|e| e.t_end)
                .max();
            let before_next = events
                .iter()
                .filter(|e| e.t_cross > last)
                .map(|e| e.t_decision)
                .min();
            let mut frame = first + stride;
            while frame <= last {
                let window_start = (frame + 1).saturating_sub(hist);
                let clear_prev = after_prev.map_or(true, |t| window_start > t);
                let clear_next = before_next.map_or(true, |t| frame < t);
                if clear_prev && clear_next && has_history(track, frame, fps) {
                    out.push(frame);
                }
                frame += stride;
            }
        }
        seg_start = seg_end + 1;
    }
    out
}

/// Lane-keep cases for every track in `recording`.
pub fn extract_lk_cases(
    recording: &Recording,
    config: &LabelingConfig,
) -> Result<Vec<LabeledCase>, LabelingError> {
    config.validate(recording.frame_rate)?;
    let mut cases = Vec::new();
    for track in &recording.tracks {
        let events = detect_lane_changes(track, recording, config.t_react_s);
        for frame in lane_keep_frames(track, recording, &events, config) {
            cases.push(keep_case(recording, track.id, frame, config.t_h)?);
        }
    }
    Ok(cases)
}

fn keep_case(recording: &Recording, vehicle: VehicleId, frame: u32, t_h: f64) -> Result<LabeledCase, LabelingError> {
    Ok(LabeledCase {
        bundle: Arc::new(assemble_case(recording, vehicle, frame, t_h)?),
        label: Label::Keep,
        provenance: Provenance {
            recording_id: recording.id,
            vehicle_id: vehicle,
            decision_frame: frame,
            event: None,
        },
    })
}

pub fn change_case(recording: &Recording, event: &LaneChangeEvent, t_h: f64) -> Result<LabeledCase, LabelingError> {
    Ok(LabeledCase {
        bundle: Arc::new(assemble_case(recording, event.vehicle_id, event.t_decision, t_h)?),
        label: event.direction.into(),
        provenance: Provenance {
            recording_id: recording.id,
            vehicle_id: event.vehicle_id,
            decision_frame: event.t_decision,
            event: Some(EventFrames {
                t_start: event.t_start,
                t_cross: event.t_cross,
                t_end: event.t_end,
            }),
        },
    })
}

/// Discretionary lane-change events of every track in `recording`.
pub fn dlc_events(recording: &Recording, t_react_s: f64) -> Vec<LaneChangeEvent> {
    let mut all = Vec::new();
    for track in &recording.tracks {
        all.extend(filter_mlc(detect_lane_changes(track, recording, t_react_s), recording));
    }
    all
}

/// All lane-change and lane-keep cases of a recording, lane changes first.
pub fn extract_cases(recording: &Recording, config: &LabelingConfig) -> Result<Vec<LabeledCase>, LabelingError> {
    config.validate(recording.frame_rate)?;
    let mut cases = Vec::new();
    for event in dlc_events(recording, config.t_react_s) {
        cases.push(change_case(recording, &event, config.t_h)?);
    }
    cases.extend(extract_lk_cases(recording, config)?);
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledCase>,
    pub test: Vec<LabeledCase>,
}

/// Random case-level split; lane-change cases in the train part are repeated
/// `dup_factor` extra times.
pub fn split_and_balance(
    cases: &[LabeledCase],
    train_fraction: f64,
    dup_factor: usize,
    seed: u64,
) -> Result<Split, LabelingError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(LabelingError::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if cases.is_empty() {
        return Err(LabelingError::Config("no cases to split".into()));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * cases.len() as f64).round() as usize;
    let mut train = Vec::new();
    for &i in &order[..n_train] {
        let copies = if cases[i].label.is_change() { 1 + dup_factor } else { 1 };
        for _ in 0..copies {
            train.push(cases[i].clone());
        }
    }
    let test = order[n_train..].iter().map(|&i| cases[i].clone()).collect();
    Ok(Split { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    All = 0,
    Train = 1,
    Test = 2,
}

impl CaseKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(CaseKind::All),
            1 => Some(CaseKind::Train),
            2 => Some(CaseKind::Test),
            _ => None,
        }
    }
}

/// Write a case file.
///
/// Layout, little-endian throughout:
///
/// ```text
/// magic "DSADLC-C" | version u32 | kind u8 | row width u32 | count u64
/// per row: row-width f64 features | label u8 |
///          recording u32 | vehicle u32 | decision frame u32 |
///          t_start u32 | t_cross u32 | t_end u32   (0xFFFFFFFF for lane keep)
/// ```
///
/// Features are the seven surrounding DOPs (P, PL, PR, FL, FR, ASL, ASR),
/// then the ego DOP, each row-major, then the ten traffic factors.
pub fn write_cases(path: &Path, kind: CaseKind, cases: &[LabeledCase]) -> Result<(), LabelingError> {
    let io = |source| LabelingError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut buf = Vec::with_capacity(32);
    buf.extend_from_slice(CASE_MAGIC);
    buf.extend_from_slice(&CASE_FORMAT_VERSION.to_le_bytes());
    buf.push(kind as u8);
    buf.extend_from_slice(&(BUNDLE_LEN as u32).to_le_bytes());
    buf.extend_from_slice(&(cases.len() as u64).to_le_bytes());
    w.write_all(&buf).map_err(io)?;
    for case in cases {
        buf.clear();
        for v in case.bundle.to_flat() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(case.label as u8);
        let p = &case.provenance;
        let ev = p.event.map_or([NO_FRAME; 3], |e| [e.t_start, e.t_cross, e.t_end]);
        for v in [p.recording_id, p.vehicle_id, p.decision_frame, ev[0], ev[1], ev[2]] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_cases(path: &Path) -> Result<(CaseKind, Vec<LabeledCase>), LabelingError> {
    let fmt = |reason: String| LabelingError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|source| LabelingError::Io {
        path: path.to_path_buf(),
        source,
    })?)
    .read_to_end(&mut bytes)
    .map_err(|source| LabelingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8).ok_or_else(|| fmt("truncated header".into()))? != CASE_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = cur.u32().ok_or_else(|| fmt("truncated header".into()))?;
    if version != CASE_FORMAT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let kind = cur
        .take(1)
        .and_then(|b| CaseKind::from_byte(b[0]))
        .ok_or_else(|| fmt("bad case kind".into()))?;
    let width = cur.u32().ok_or_else(|| fmt("truncated header".into()))? as usize;
    if width != BUNDLE_LEN {
        return Err(fmt(format!("row width {width}, expected {BUNDLE_LEN}")));
    }
    let count = cur.u64().ok_or_else(|| fmt("truncated header".into()))? as usize;
    let row_bytes = BUNDLE_LEN * 8 + 1 + 6 * 4;
    if bytes.len() - cur.pos != count.saturating_mul(row_bytes) {
        return Err(fmt(format!(
            "{count} rows need {} bytes, found {}",
            count.saturating_mul(row_bytes),
            bytes.len() - cur.pos
        )));
    }
    let mut cases = Vec::with_capacity(count);
    let mut flat = vec![0.0; BUNDLE_LEN];
    for row in 0..count {
        for v in flat.iter_mut() {
            *v = cur.f64().expect("length checked");
        }
        let label = Label::from_index(cur.take(1).expect("length checked")[0] as usize)
            .ok_or_else(|| fmt(format!("row {row}: bad label")))?;
        let mut ids = [0u32; 6];
        for v in ids.iter_mut() {
            *v = cur.u32().expect("length checked");
        }
        let event = (ids[3] != NO_FRAME).then_some(EventFrames {
            t_start: ids[3],
            t_cross: ids[4],
            t_end: ids[5],
        });
        if event.is_some() != label.is_change() {
            return Err(fmt(format!("row {row}: label and event frames disagree")));
        }
        cases.push(LabeledCase {
            bundle: Arc::new(FeatureBundle::from_flat(&flat).expect("width checked")),
            label,
            provenance: Provenance {
                recording_id: ids[0],
                vehicle_id: ids[1],
                decision_frame: ids[2],
                event,
            },
        });
    }
    Ok((kind, cases))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::testutil::{constant_track, lane_center, recording_of, three_lane_markings};
    use crate::trajectory::RecordingParts;
    use proptest::prelude::*;
    use std::collections::{HashMap, HashSet};

    /// Constant-speed track changing from `from` to `to` with a smooth
    /// lateral blend of `dur` frames beginning at frame `start`.
    fn changing_track(id: VehicleId, from: LaneId, to: LaneId, n: usize, start: u32, dur: u32) -> VehicleTrack {
        let m = three_lane_markings();
        let (y0, y1) = (lane_center(&m, from), lane_center(&m, to));
        let mut t = constant_track(id, from, 0.0, 30.0, 0, n, 25.0);
        for f in t.frames.iter_mut() {
            let s = ((f.frame as f64 - start as f64) / dur as f64).clamp(0.0, 1.0);
            f.y = y0 + (y1 - y0) * (3.0 * s * s - 2.0 * s * s * s);
            f.vy = if s > 0.0 && s < 1.0 {
                (y1 - y0) * 6.0 * s * (1.0 - s) * 25.0 / dur as f64
            } else {
                0.0
            };
            if s >= 0.5 {
                f.lane_id = to;
            }
        }
        t
    }

    #[test]
    fn no_change_no_events() {
        let rec = recording_of(vec![constant_track(1, 3, 0.0, 30.0, 0, 300, 25.0)]);
        assert!(detect_lane_changes(&rec.tracks[0], &rec, 1.0).is_empty());
    }

    #[test]
    fn detects_left_change() {
        let rec = recording_of(vec![changing_track(1, 3, 2, 500, 200, 100)]);
        let ev = detect_lane_changes(&rec.tracks[0], &rec, 1.0);
        assert_eq!(ev.len(), 1);
        let e = &ev[0];
        assert_eq!(e.direction, ChangeDirection::Left);
        assert_eq!((e.from_lane, e.to_lane), (3, 2));
        assert_eq!(e.t_cross, 250);
        assert!((200..=203).contains(&e.t_start), "{e:?}");
        assert!((297..=300).contains(&e.t_end), "{e:?}");
        assert_eq!(e.t_decision + 25, e.t_start);
        assert!(e.t_decision < e.t_start && e.t_start <= e.t_cross && e.t_cross <= e.t_end);
    }

    #[test]
    fn detects_right_change() {
        let rec = recording_of(vec![changing_track(1, 3, 4, 500, 200, 100)]);
        let ev = detect_lane_changes(&rec.tracks[0], &rec, 1.0);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].direction, ChangeDirection::Right);
    }

    #[test]
    fn decision_offset_follows_frame_rate() {
        let rec = recording_of(vec![changing_track(1, 3, 2, 600, 300, 100)]);
        let ev = detect_lane_changes(&rec.tracks[0], &rec, 1.0);
        assert_eq!(ev[0].t_start - ev[0].t_decision, 25);
        let ev = detect_lane_changes(&rec.tracks[0], &rec, 1.5);
        assert_eq!(ev[0].t_start - ev[0].t_decision, 38);
    }

    #[test]
    fn change_without_history_is_discarded() {
        // Onset at frame 60, decision at 35: less than 2 s in.
        let rec = recording_of(vec![changing_track(1, 3, 2, 300, 60, 100)]);
        assert!(detect_lane_changes(&rec.tracks[0], &rec, 1.0).is_empty());
    }

    fn event(vehicle: VehicleId, from: LaneId, to: LaneId) -> LaneChangeEvent {
        LaneChangeEvent {
            vehicle_id: vehicle,
            t_decision: 100,
            t_start: 125,
            t_cross: 150,
            t_end: 200,
            direction: if to < from { ChangeDirection::Left } else { ChangeDirection::Right },
            from_lane: from,
            to_lane: to,
        }
    }

    fn recording_with_merge(merge: Vec<LaneId>) -> Recording {
        Recording::new(RecordingParts {
            id: 1,
            frame_rate: 25.0,
            speed_limit: None,
            upper_markings: vec![],
            lower_markings: three_lane_markings(),
            merge_lanes: merge,
            tracks: vec![],
            neighbor_ids_provided: false,
        })
        .unwrap()
    }

    #[test]
    fn mlc_filter() {
        let events = vec![event(1, 4, 3), event(2, 3, 2), event(3, 4, 3), event(4, 2, 3), event(5, 3, 4)];
        let none = recording_with_merge(vec![]);
        assert_eq!(filter_mlc(events.clone(), &none), events);
        let rec = recording_with_merge(vec![4]);
        let kept = filter_mlc(events.clone(), &rec);
        assert_eq!(kept, vec![events[1].clone(), events[3].clone(), events[4].clone()]);
        let all_merge = vec![event(1, 4, 3), event(2, 4, 3)];
        assert!(filter_mlc(all_merge, &rec).is_empty());
    }

    #[test]
    fn short_stay_gives_no_keep_cases() {
        let n = (11.9 * 25.0) as usize;
        let rec = recording_of(vec![constant_track(1, 3, 0.0, 30.0, 0, n, 25.0)]);
        assert!(extract_lk_cases(&rec, &LabelingConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn twenty_second_stay_gives_nine_cases() {
        let rec = recording_of(vec![constant_track(1, 3, 0.0, 30.0, 0, 500, 25.0)]);
        let cases = extract_lk_cases(&rec, &LabelingConfig::default()).unwrap();
        let frames: Vec<u32> = cases.iter().map(|c| c.provenance.decision_frame).collect();
        assert_eq!(frames, (1..=9).map(|k| 50 * k).collect::<Vec<_>>());
        assert!(cases.iter().all(|c| c.label == Label::Keep && c.provenance.event.is_none()));
    }

    #[test]
    fn keep_frames_avoid_maneuvers() {
        // 60 s track, change onset at 20 s; both segments exceed 12 s.
        let track = changing_track(1, 3, 2, 1500, 500, 100);
        let rec = recording_of(vec![track]);
        let events = detect_lane_changes(&rec.tracks[0], &rec, 1.0);
        assert_eq!(events.len(), 1);
        let e = &events[0];
        let frames = lane_keep_frames(&rec.tracks[0], &rec, &events, &LabelingConfig::default());
        assert!(!frames.is_empty());
        for f in &frames {
            let window_start = f - 49;
            assert!(*f < e.t_decision || window_start > e.t_end, "frame {f} vs {e:?}");
        }
        assert!(frames.iter().any(|&f| f > e.t_end));
    }

    #[test]
    fn merge_lane_segments_give_no_keep_cases() {
        let mut parts = recording_with_merge(vec![4]).into_parts();
        parts.tracks = vec![constant_track(1, 4, 0.0, 30.0, 0, 500, 25.0)];
        let rec = Recording::new(parts).unwrap();
        assert!(extract_lk_cases(&rec, &LabelingConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn extract_cases_reproduces_bundles() {
        let rec = recording_of(vec![
            changing_track(1, 3, 2, 1000, 400, 100),
            constant_track(2, 2, 60.0, 28.0, 0, 1000, 25.0),
        ])
        .with_geometric_annotations()
        .unwrap();
        let cfg = LabelingConfig::default();
        let cases = extract_cases(&rec, &cfg).unwrap();
        assert_eq!(cases.iter().filter(|c| c.label == Label::Left).count(), 1);
        for c in &cases {
            let again = assemble_case(&rec, c.provenance.vehicle_id, c.provenance.decision_frame, cfg.t_h).unwrap();
            assert_eq!(*c.bundle, again);
        }
    }

    fn synthetic_cases(keep: usize, left: usize, right: usize) -> Vec<LabeledCase> {
        let bundle = Arc::new(FeatureBundle::zeros());
        let mut out = Vec::new();
        for (i, label) in std::iter::repeat(Label::Keep)
            .take(keep)
            .chain(std::iter::repeat(Label::Left).take(left))
            .chain(std::iter::repeat(Label::Right).take(right))
            .enumerate()
        {
            out.push(LabeledCase {
                bundle: bundle.clone(),
                label,
                provenance: Provenance {
                    recording_id: 1,
                    vehicle_id: i as u32,
                    decision_frame: 100,
                    event: label.is_change().then_some(EventFrames { t_start: 125, t_cross: 150, t_end: 200 }),
                },
            });
        }
        out
    }

    fn check_split(cases: &[LabeledCase], split: &Split, dup: usize) {
        let mut train_counts: HashMap<_, usize> = HashMap::new();
        for c in &split.train {
            *train_counts.entry(c.provenance.key()).or_default() += 1;
        }
        let test_keys: HashSet<_> = split.test.iter().map(|c| c.provenance.key()).collect();
        assert_eq!(test_keys.len(), split.test.len());
        for c in cases {
            let k = c.provenance.key();
            match train_counts.get(&k) {
                Some(&n) => {
                    assert!(!test_keys.contains(&k));
                    assert_eq!(n, if c.label.is_change() { 1 + dup } else { 1 });
                }
                None => assert!(test_keys.contains(&k)),
            }
        }
    }

    #[test]
    fn split_recount() {
        let cases = synthetic_cases(100, 10, 0);
        let split = split_and_balance(&cases, 0.9, 16, 7).unwrap();
        assert_eq!(train_counts_of(&split), 99);
        let left_orig = split.test.iter().filter(|c| c.label == Label::Left).count();
        let left_train = split.train.iter().filter(|c| c.label == Label::Left).count();
        assert_eq!(left_train, 17 * (10 - left_orig));
        check_split(&cases, &split, 16);
    }

    fn train_counts_of(split: &Split) -> usize {
        split.train.iter().map(|c| c.provenance.key()).collect::<HashSet<_>>().len()
    }

    #[test]
    fn zero_dup_is_plain_split() {
        let cases = synthetic_cases(50, 5, 5);
        let split = split_and_balance(&cases, 0.8, 0, 3).unwrap();
        assert_eq!(split.train.len() + split.test.len(), cases.len());
        check_split(&cases, &split, 0);
    }

    #[test]
    fn split_is_deterministic() {
        let cases = synthetic_cases(80, 10, 10);
        let keys = |s: &Split| s.train.iter().chain(&s.test).map(|c| c.provenance.key()).collect::<Vec<_>>();
        let a = split_and_balance(&cases, 0.9, 16, 42).unwrap();
        let b = split_and_balance(&cases, 0.9, 16, 42).unwrap();
        assert_eq!(keys(&a), keys(&b));
        let c = split_and_balance(&cases, 0.9, 16, 43).unwrap();
        assert_ne!(keys(&a), keys(&c));
    }

    #[test]
    fn bad_fraction_rejected() {
        let cases = synthetic_cases(5, 1, 1);
        for f in [0.0, 1.0, 1.2, -0.1, f64::NAN] {
            assert!(matches!(split_and_balance(&cases, f, 16, 1), Err(LabelingError::Config(_))));
        }
        assert!(split_and_balance(&[], 0.9, 16, 1).is_err());
    }

    #[test]
    fn case_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.bin");
        let mut cases = synthetic_cases(3, 2, 2);
        let mut b = FeatureBundle::zeros();
        b.ego.0[3][4] = -1.25e-7;
        b.factors.0[9] = 42.5;
        cases[4].bundle = Arc::new(b);
        write_cases(&path, CaseKind::Test, &cases).unwrap();
        let (kind, back) = read_cases(&path).unwrap();
        assert_eq!(kind, CaseKind::Test);
        assert_eq!(back, cases);
    }

    #[test]
    fn truncated_case_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.bin");
        write_cases(&path, CaseKind::All, &synthetic_cases(2, 1, 0)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_cases(&path), Err(LabelingError::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_cases(&path), Err(LabelingError::Format { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn split_invariants(keep in 1usize..60, left in 0usize..10, right in 0usize..10, dup in 0usize..20, frac in 0.05f64..0.95, seed: u64) {
            let cases = synthetic_cases(keep, left, right);
            let split = split_and_balance(&cases, frac, dup, seed).unwrap();
            check_split(&cases, &split, dup);
            let n_train = (frac * cases.len() as f64).round() as usize;
            prop_assert_eq!(train_counts_of(&split), n_train);
        }

        #[test]
        fn events_are_ordered(start in 60u32..400, dur in 75u32..125, left: bool) {
            let to = if left { 2 } else { 4 };
            let rec = recording_of(vec![changing_track(1, 3, to, 600, start, dur)]);
            for e in detect_lane_changes(&rec.tracks[0], &rec, 1.0) {
                prop_assert!(e.t_decision < e.t_start && e.t_start <= e.t_cross && e.t_cross <= e.t_end);
                prop_assert_eq!(e.direction == ChangeDirection::Left, left);
            }
        }
    }
}
