//! Reading and writing recordings in the three-file highD layout.
//!
//! Each recording `NN` is stored as `NN_recordingMeta.csv`, `NN_tracksMeta.csv`
//! and `NN_tracks.csv`. Required columns:
//!
//! * tracks: `frame,id,x,y,width,height,xVelocity,yVelocity,xAcceleration,
//!   yAcceleration,dhw,thw,ttc,precedingId,followingId,leftPrecedingId,
//!   leftAlongsideId,leftFollowingId,rightPrecedingId,rightAlongsideId,
//!   rightFollowingId,laneId` (the eight neighbor columns may be omitted
//!   together, in which case roles are resolved geometrically)
//! * tracks meta: `id,class,drivingDirection,numFrames`
//! * recording meta: `id,frameRate,speedLimit,upperLaneMarkings,lowerLaneMarkings`
//!   plus the optional `mergeLanes` (semicolon-separated lane ids)
//!
//! `x,y` in the files are the top-left corner of the bounding box in image
//! coordinates (y grows downward), `width` is the box extent along x and
//! `height` along y. Absent neighbors are encoded as 0. Extra columns are
//! ignored so original dataset files load unmodified.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::trajectory::{
    DrivingDirection, LaneId, NeighborIds, Recording, RecordingParts, TrackFrame, TrajectoryError,
    VehicleClass, VehicleId, VehicleTrack,
};

pub const DEFAULT_FRAME_RATE: f64 = 25.0;

/// Share of a carriageway's observed length after which a lane that first
/// shows traffic is treated as an on-ramp lane.
const MERGE_LANE_ONSET_FRACTION: f64 = 0.2;

pub const TRACK_COLUMNS: [&str; 22] = [
    "frame",
    "id",
    "x",
    "y",
    "width",
    "height",
    "xVelocity",
    "yVelocity",
    "xAcceleration",
    "yAcceleration",
    "dhw",
    "thw",
    "ttc",
    "precedingId",
    "followingId",
    "leftPrecedingId",
    "leftAlongsideId",
    "leftFollowingId",
    "rightPrecedingId",
    "rightAlongsideId",
    "rightFollowingId",
    "laneId",
];
const NEIGHBOR_COLUMNS: std::ops::Range<usize> = 13..21;
pub const TRACK_META_COLUMNS: [&str; 4] = ["id", "class", "drivingDirection", "numFrames"];
pub const RECORDING_META_COLUMNS: [&str; 6] = [
    "id",
    "frameRate",
    "speedLimit",
    "upperLaneMarkings",
    "lowerLaneMarkings",
    "mergeLanes",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: schema error: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: integrity error for vehicle {vehicle}: {reason}")]
    Integrity {
        path: PathBuf,
        vehicle: VehicleId,
        reason: String,
    },
    #[error("{path}: {source}")]
    Trajectory {
        path: PathBuf,
        #[source]
        source: TrajectoryError,
    },
}

/// The three files of one recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordingPaths {
    pub recording_meta: PathBuf,
    pub tracks_meta: PathBuf,
    pub tracks: PathBuf,
}

impl RecordingPaths {
    pub fn in_dir(dir: impl AsRef<Path>, recording_id: u32) -> Self {
        let dir = dir.as_ref();
        RecordingPaths {
            recording_meta: dir.join(format!("{recording_id:02}_recordingMeta.csv")),
            tracks_meta: dir.join(format!("{recording_id:02}_tracksMeta.csv")),
            tracks: dir.join(format!("{recording_id:02}_tracks.csv")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<RecordingPaths>,
}

impl DatasetManifest {
    /// Find every `NN_recordingMeta.csv` under `root` with its sibling files.
    pub fn discover(root: impl AsRef<Path>) -> Result<Self, IngestError> {
        let root = root.as_ref().to_path_buf();
        let read = fs::read_dir(&root).map_err(|source| IngestError::Io {
            path: root.clone(),
            source,
        })?;
        let mut prefixes = Vec::new();
        for entry in read {
            let entry = entry.map_err(|source| IngestError::Io {
                path: root.clone(),
                source,
            })?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(prefix) = name.strip_suffix("_recordingMeta.csv") {
                prefixes.push(prefix.to_string());
            }
        }
        prefixes.sort();
        let mut entries = Vec::with_capacity(prefixes.len());
        for prefix in prefixes {
            let paths = RecordingPaths {
                recording_meta: root.join(format!("{prefix}_recordingMeta.csv")),
                tracks_meta: root.join(format!("{prefix}_tracksMeta.csv")),
                tracks: root.join(format!("{prefix}_tracks.csv")),
            };
            for p in [&paths.tracks_meta, &paths.tracks] {
                if !p.exists() {
                    return Err(IngestError::Io {
                        path: p.clone(),
                        source: io::Error::new(io::ErrorKind::NotFound, "missing sibling file"),
                    });
                }
            }
            entries.push(paths);
        }
        Ok(DatasetManifest { root, entries })
    }

    pub fn load_all(&self) -> Result<Vec<Recording>, IngestError> {
        self.entries.iter().map(load_recording).collect()
    }
}

struct Table {
    path: PathBuf,
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, IngestError> {
        let file = File::open(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let csv_err = |source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let headers = reader.headers().map_err(csv_err)?.clone();
        if headers.is_empty() {
            return Err(IngestError::Schema {
                path: path.to_path_buf(),
                message: "header row missing".into(),
            });
        }
        let columns = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim_start_matches('\u{feff}').to_string(), i))
            .collect();
        let rows = reader
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(csv_err)?;
        Ok(Table {
            path: path.to_path_buf(),
            columns,
            rows,
        })
    }

    fn col(&self, name: &str) -> Result<usize, IngestError> {
        self.columns
            .get(name)
            .copied()
            .ok_or_else(|| IngestError::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    fn opt_col(&self, name: &str) -> Option<usize> {
        self.columns.get(name).copied()
    }

    fn parse<T: std::str::FromStr>(
        &self,
        row: &csv::StringRecord,
        row_no: usize,
        col: usize,
        name: &str,
    ) -> Result<T, IngestError> {
        let raw = row.get(col).unwrap_or("");
        raw.parse().map_err(|_| IngestError::Schema {
            path: self.path.clone(),
            message: format!("row {}: column `{name}` has unparsable value {raw:?}", row_no + 1),
        })
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str) -> Option<Vec<T>> {
    raw.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect()
}

fn neighbor(raw: i64) -> Option<VehicleId> {
    (raw > 0).then_some(raw as VehicleId)
}

struct TrackMeta {
    class: VehicleClass,
    direction: DrivingDirection,
    num_frames: usize,
}

/// Load one recording and convert it to the canonical frame.
pub fn load_recording(paths: &RecordingPaths) -> Result<Recording, IngestError> {
    let meta = Table::read(&paths.recording_meta)?;
    let row = meta.rows.first().ok_or_else(|| IngestError::Schema {
        path: meta.path.clone(),
        message: "no recording row".into(),
    })?;
    let id: u32 = meta.parse(row, 0, meta.col("id")?, "id")?;
    let frame_rate: f64 = match meta.opt_col("frameRate") {
        Some(c) => meta.parse(row, 0, c, "frameRate")?,
        None => DEFAULT_FRAME_RATE,
    };
    let speed_limit: f64 = meta.parse(row, 0, meta.col("speedLimit")?, "speedLimit")?;
    let markings = |name: &str| -> Result<Vec<f64>, IngestError> {
        let raw = row.get(meta.col(name)?).unwrap_or("");
        parse_list(raw).ok_or_else(|| IngestError::Schema {
            path: meta.path.clone(),
            message: format!("column `{name}` is not a `;`-separated number list"),
        })
    };
    let upper_markings = markings("upperLaneMarkings")?;
    let lower_markings = markings("lowerLaneMarkings")?;
    let explicit_merge = match meta.opt_col("mergeLanes") {
        Some(c) => Some(
            parse_list::<LaneId>(row.get(c).unwrap_or("")).ok_or_else(|| IngestError::Schema {
                path: meta.path.clone(),
                message: "column `mergeLanes` is not a `;`-separated lane id list".into(),
            })?,
        ),
        None => None,
    };

    let track_meta = read_tracks_meta(&paths.tracks_meta)?;
    let tracks = read_tracks(&paths.tracks, &track_meta)?;
    let (tracks, neighbor_ids_provided) = tracks;

    let merge_lanes = match explicit_merge {
        Some(ids) => ids,
        None => infer_merge_lanes(&upper_markings, &lower_markings, &tracks),
    };

    Recording::new(RecordingParts {
        id,
        frame_rate,
        speed_limit: (speed_limit > 0.0).then_some(speed_limit),
        upper_markings,
        lower_markings,
        merge_lanes,
        tracks,
        neighbor_ids_provided,
    })
    .map_err(|source| match source {
        TrajectoryError::Integrity { vehicle, reason } => IngestError::Integrity {
            path: paths.tracks.clone(),
            vehicle,
            reason,
        },
        source => IngestError::Trajectory {
            path: paths.tracks.clone(),
            source,
        },
    })
}

fn read_tracks_meta(path: &Path) -> Result<HashMap<VehicleId, TrackMeta>, IngestError> {
    let t = Table::read(path)?;
    let (c_id, c_class, c_dir, c_n) = (
        t.col("id")?,
        t.col("class")?,
        t.col("drivingDirection")?,
        t.col("numFrames")?,
    );
    let mut out = HashMap::with_capacity(t.rows.len());
    for (i, row) in t.rows.iter().enumerate() {
        let id: VehicleId = t.parse(row, i, c_id, "id")?;
        let raw_class = row.get(c_class).unwrap_or("");
        let class = VehicleClass::parse(raw_class).ok_or_else(|| IngestError::Schema {
            path: t.path.clone(),
            message: format!("row {}: unknown vehicle class {raw_class:?}", i + 1),
        })?;
        let code: i64 = t.parse(row, i, c_dir, "drivingDirection")?;
        let direction = DrivingDirection::from_code(code).ok_or_else(|| IngestError::Schema {
            path: t.path.clone(),
            message: format!("row {}: unknown driving direction {code}", i + 1),
        })?;
        let num_frames: usize = t.parse(row, i, c_n, "numFrames")?;
        out.insert(
            id,
            TrackMeta {
                class,
                direction,
                num_frames,
            },
        );
    }
    Ok(out)
}

fn read_tracks(
    path: &Path,
    meta: &HashMap<VehicleId, TrackMeta>,
) -> Result<(Vec<VehicleTrack>, bool), IngestError> {
    let t = Table::read(path)?;
    let mut cols = [0usize; 22];
    let present: Vec<bool> = TRACK_COLUMNS.iter().map(|c| t.opt_col(c).is_some()).collect();
    let neighbors_present = present[NEIGHBOR_COLUMNS].iter().any(|&p| p);
    for (i, name) in TRACK_COLUMNS.iter().enumerate() {
        if NEIGHBOR_COLUMNS.contains(&i) && !neighbors_present {
            continue;
        }
        cols[i] = t.col(name)?;
    }

    let mut by_id: BTreeMap<VehicleId, Vec<(TrackFrame, f64, f64)>> = BTreeMap::new();
    for (r, row) in t.rows.iter().enumerate() {
        let f = |i: usize| -> Result<f64, IngestError> { t.parse(row, r, cols[i], TRACK_COLUMNS[i]) };
        let id: VehicleId = t.parse(row, r, cols[1], "id")?;
        let m = meta.get(&id).ok_or_else(|| IngestError::Integrity {
            path: t.path.clone(),
            vehicle: id,
            reason: "track has no tracks-meta row".into(),
        })?;
        let (x, y, bw, bh) = (f(2)?, f(3)?, f(4)?, f(5)?);
        let (xv, yv, xa, ya) = (f(6)?, f(7)?, f(8)?, f(9)?);
        let (cx, cy, vx, vy, ax, ay) = match m.direction {
            DrivingDirection::Increasing => (x + bw, -(y + 0.5 * bh), xv, -yv, xa, -ya),
            DrivingDirection::Decreasing => (-x, y + 0.5 * bh, -xv, yv, -xa, ya),
        };
        let mut neighbors = NeighborIds::default();
        if neighbors_present {
            let n = |i: usize| -> Result<Option<VehicleId>, IngestError> {
                Ok(neighbor(t.parse(row, r, cols[i], TRACK_COLUMNS[i])?))
            };
            neighbors = NeighborIds {
                preceding: n(13)?,
                following: n(14)?,
                left_preceding: n(15)?,
                left_alongside: n(16)?,
                left_following: n(17)?,
                right_preceding: n(18)?,
                right_alongside: n(19)?,
                right_following: n(20)?,
            };
        }
        let frame = TrackFrame {
            frame: t.parse(row, r, cols[0], "frame")?,
            vehicle_id: id,
            x: cx,
            y: cy,
            vx,
            vy,
            ax,
            ay,
            lane_id: t.parse(row, r, cols[21], "laneId")?,
            space_headway: f(10)?,
            time_headway: f(11)?,
            ttc: f(12)?,
            neighbors,
        };
        by_id.entry(id).or_default().push((frame, bw, bh));
    }

    let mut tracks = Vec::with_capacity(by_id.len());
    for (id, mut rows) in by_id {
        rows.sort_by_key(|(f, _, _)| f.frame);
        let m = &meta[&id];
        for w in rows.windows(2) {
            if w[1].0.frame != w[0].0.frame + 1 {
                return Err(IngestError::Integrity {
                    path: t.path.clone(),
                    vehicle: id,
                    reason: format!(
                        "frames not contiguous: {} follows {}",
                        w[1].0.frame, w[0].0.frame
                    ),
                });
            }
        }
        if rows.len() != m.num_frames {
            return Err(IngestError::Integrity {
                path: t.path.clone(),
                vehicle: id,
                reason: format!("{} rows but numFrames = {}", rows.len(), m.num_frames),
            });
        }
        let (length, width) = (rows[0].1, rows[0].2);
        tracks.push(VehicleTrack {
            id,
            class: m.class,
            direction: m.direction,
            width,
            length,
            frames: rows.into_iter().map(|(f, _, _)| f).collect(),
        });
    }
    if let Some((&id, _)) = meta
        .iter()
        .find(|(id, m)| m.num_frames > 0 && !tracks.iter().any(|t| t.id == **id))
    {
        return Err(IngestError::Integrity {
            path: t.path.clone(),
            vehicle: id,
            reason: "tracks-meta row has no frames".into(),
        });
    }
    Ok((tracks, neighbors_present))
}

/// Flag lanes whose traffic only starts well downstream of the carriageway's
/// upstream edge, i.e. lanes whose markings begin inside the recorded stretch.
pub fn infer_merge_lanes(upper: &[f64], lower: &[f64], tracks: &[VehicleTrack]) -> Vec<LaneId> {
    let lanes = crate::trajectory::lanes_from_markings(upper, lower, &[]);
    let mut lane_min: HashMap<LaneId, f64> = HashMap::new();
    let mut extent: HashMap<DrivingDirection, (f64, f64)> = HashMap::new();
    for t in tracks {
        for f in &t.frames {
            let e = lane_min.entry(f.lane_id).or_insert(f64::INFINITY);
            *e = e.min(f.x);
            let r = extent
                .entry(t.direction)
                .or_insert((f64::INFINITY, f64::NEG_INFINITY));
            r.0 = r.0.min(f.x);
            r.1 = r.1.max(f.x);
        }
    }
    lanes
        .iter()
        .filter(|lane| {
            let (Some(&lo), Some(&(dmin, dmax))) =
                (lane_min.get(&lane.id), extent.get(&lane.direction))
            else {
                return false;
            };
            dmax > dmin && lo - dmin > MERGE_LANE_ONSET_FRACTION * (dmax - dmin)
        })
        .map(|l| l.id)
        .collect()
}

fn join_list<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn id_field(id: Option<VehicleId>) -> String {
    id.unwrap_or(0).to_string()
}

/// Write a recording as the three CSV files, converting back to image coordinates.
pub fn write_recording(recording: &Recording, paths: &RecordingPaths) -> Result<(), IngestError> {
    for p in [&paths.recording_meta, &paths.tracks_meta, &paths.tracks] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| IngestError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
    }

    write_csv(&paths.recording_meta, |w| {
        w.write_record(RECORDING_META_COLUMNS)?;
        w.write_record([
            recording.id.to_string(),
            recording.frame_rate.to_string(),
            recording.speed_limit.unwrap_or(-1.0).to_string(),
            join_list(&recording.upper_markings),
            join_list(&recording.lower_markings),
            join_list(&recording.merge_lane_ids()),
        ])
    })?;

    write_csv(&paths.tracks_meta, |w| {
        w.write_record(TRACK_META_COLUMNS)?;
        for t in &recording.tracks {
            w.write_record([
                t.id.to_string(),
                t.class.as_str().to_string(),
                t.direction.code().to_string(),
                t.frames.len().to_string(),
            ])?;
        }
        Ok(())
    })?;

    let with_neighbors = recording.neighbor_ids_provided;
    write_csv(&paths.tracks, |w| {
        let header: Vec<&str> = TRACK_COLUMNS
            .iter()
            .enumerate()
            .filter(|(i, _)| with_neighbors || !NEIGHBOR_COLUMNS.contains(i))
            .map(|(_, c)| *c)
            .collect();
        w.write_record(&header)?;
        for t in &recording.tracks {
            for f in &t.frames {
                let (x, y, xv, yv, xa, ya) = match t.direction {
                    DrivingDirection::Increasing => {
                        (f.x - t.length, -f.y - 0.5 * t.width, f.vx, -f.vy, f.ax, -f.ay)
                    }
                    DrivingDirection::Decreasing => {
                        (-f.x, f.y - 0.5 * t.width, -f.vx, f.vy, -f.ax, f.ay)
                    }
                };
                let mut rec: Vec<String> = vec![
                    f.frame.to_string(),
                    t.id.to_string(),
                    x.to_string(),
                    y.to_string(),
                    t.length.to_string(),
                    t.width.to_string(),
                    xv.to_string(),
                    yv.to_string(),
                    xa.to_string(),
                    ya.to_string(),
                    f.space_headway.to_string(),
                    f.time_headway.to_string(),
                    f.ttc.to_string(),
                ];
                if with_neighbors {
                    let n = &f.neighbors;
                    rec.extend([
                        id_field(n.preceding),
                        id_field(n.following),
                        id_field(n.left_preceding),
                        id_field(n.left_alongside),
                        id_field(n.left_following),
                        id_field(n.right_preceding),
                        id_field(n.right_alongside),
                        id_field(n.right_following),
                    ]);
                }
                rec.push(f.lane_id.to_string());
                w.write_record(&rec)?;
            }
        }
        Ok(())
    })
}

fn write_csv(
    path: &Path,
    body: impl FnOnce(&mut csv::Writer<io::BufWriter<File>>) -> Result<(), csv::Error>,
) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(io::BufWriter::new(file));
    body(&mut w).map_err(|source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Field-wise comparison allowing `tol` absolute difference on floats.
pub fn recordings_match(a: &Recording, b: &Recording, tol: f64) -> Result<(), String> {
    let close = |x: f64, y: f64| (x - y).abs() <= tol;
    if a.id != b.id || a.frame_rate != b.frame_rate || a.speed_limit != b.speed_limit {
        return Err("recording metadata differs".into());
    }
    if a.upper_markings != b.upper_markings || a.lower_markings != b.lower_markings {
        return Err("lane markings differ".into());
    }
    if a.lanes != b.lanes {
        return Err("lanes differ".into());
    }
    if a.neighbor_ids_provided != b.neighbor_ids_provided {
        return Err("neighbor id provenance differs".into());
    }
    if a.tracks.len() != b.tracks.len() {
        return Err(format!("{} vs {} tracks", a.tracks.len(), b.tracks.len()));
    }
    for (ta, tb) in a.tracks.iter().zip(&b.tracks) {
        if ta.id != tb.id
            || ta.class != tb.class
            || ta.direction != tb.direction
            || !close(ta.width, tb.width)
            || !close(ta.length, tb.length)
            || ta.frames.len() != tb.frames.len()
        {
            return Err(format!("track {} header differs", ta.id));
        }
        for (fa, fb) in ta.frames.iter().zip(&tb.frames) {
            let same_exact = fa.frame == fb.frame
                && fa.vehicle_id == fb.vehicle_id
                && fa.lane_id == fb.lane_id
                && fa.neighbors == fb.neighbors;
            let same_float = [
                (fa.x, fb.x),
                (fa.y, fb.y),
                (fa.vx, fb.vx),
                (fa.vy, fb.vy),
                (fa.ax, fb.ax),
                (fa.ay, fb.ay),
                (fa.space_headway, fb.space_headway),
                (fa.time_headway, fb.time_headway),
                (fa.ttc, fb.ttc),
            ]
            .iter()
            .all(|&(x, y)| close(x, y));
            if !same_exact || !same_float {
                return Err(format!("track {} frame {} differs", ta.id, fa.frame));
            }
        }
    }
    Ok(())
}
