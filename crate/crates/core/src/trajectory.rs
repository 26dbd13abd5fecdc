//! In-memory data model for recordings, tracks, lanes and neighbor roles.
//!
//! All tracks are held in a canonical frame: `x` is the longitudinal
//! position of the vehicle's front-center along its travel direction and `y`
//! is the lateral position of its center, positive toward the overtaking
//! (left) side. Readers and writers in [`crate::ingest`] convert to and from
//! the image-style dataset coordinates.

use std::collections::HashMap;

use thiserror::Error;

pub type VehicleId = u32;
pub type LaneId = i32;

/// Length of the history window behind every decision, in seconds.
pub const HISTORY_WINDOW_S: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("vehicle {vehicle} not found at frame {frame}")]
    NotFound { vehicle: VehicleId, frame: u32 },
    #[error("window underrun for vehicle {vehicle}: {needed} frames ending at {end_frame} requested, {available} available")]
    WindowUnderrun {
        vehicle: VehicleId,
        end_frame: u32,
        needed: usize,
        available: usize,
    },
    #[error("window duration {0} s yields no frames")]
    EmptyWindow(f64),
    #[error("integrity violation for vehicle {vehicle}: {reason}")]
    Integrity { vehicle: VehicleId, reason: String },
    #[error("invalid recording: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VehicleClass {
    Car,
    Truck,
}

impl VehicleClass {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Car => "Car",
            VehicleClass::Truck => "Truck",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "Car" | "car" => Some(VehicleClass::Car),
            "Truck" | "truck" => Some(VehicleClass::Truck),
            _ => None,
        }
    }
}

/// Travel direction along the recording's image x axis.
///
/// The numeric codes are the dataset's `drivingDirection` values: the upper
/// carriageway travels toward decreasing x, the lower one toward increasing x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DrivingDirection {
    Decreasing = 1,
    Increasing = 2,
}

impl DrivingDirection {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(DrivingDirection::Decreasing),
            2 => Some(DrivingDirection::Increasing),
            _ => None,
        }
    }
}

/// Neighbor identifiers as carried per frame by the dataset.
/// Left and right are relative to the vehicle's own travel direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NeighborIds {
    pub preceding: Option<VehicleId>,
    pub following: Option<VehicleId>,
    pub left_preceding: Option<VehicleId>,
    pub left_alongside: Option<VehicleId>,
    pub left_following: Option<VehicleId>,
    pub right_preceding: Option<VehicleId>,
    pub right_alongside: Option<VehicleId>,
    pub right_following: Option<VehicleId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackFrame {
    pub frame: u32,
    pub vehicle_id: VehicleId,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub lane_id: LaneId,
    /// Front-center to front-center distance to the preceding vehicle, 0 if none.
    pub space_headway: f64,
    /// Space headway divided by own speed, 0 if no preceding vehicle.
    pub time_headway: f64,
    /// Time to collision with the preceding vehicle as carried by the source, 0 if none.
    pub ttc: f64,
    pub neighbors: NeighborIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrack {
    pub id: VehicleId,
    pub class: VehicleClass,
    pub direction: DrivingDirection,
    /// Lateral extent in meters.
    pub width: f64,
    /// Longitudinal extent in meters.
    pub length: f64,
    pub frames: Vec<TrackFrame>,
}

impl VehicleTrack {
    pub fn first_frame(&self) -> u32 {
        self.frames.first().map_or(0, |f| f.frame)
    }

    pub fn last_frame(&self) -> u32 {
        self.frames.last().map_or(0, |f| f.frame)
    }

    /// Frames are contiguous, so lookup is an offset from the first frame.
    pub fn frame_at(&self, frame: u32) -> Option<&TrackFrame> {
        let first = self.frames.first()?.frame;
        if frame < first {
            return None;
        }
        self.frames.get((frame - first) as usize)
    }

    pub fn window(
        &self,
        end_frame: u32,
        duration_s: f64,
        frame_rate: f64,
    ) -> Result<TrajectoryWindow<'_>, TrajectoryError> {
        window_of(self.id, &self.frames, end_frame, duration_s, frame_rate)
    }
}

/// A contiguous run of frames ending at a given frame, inclusive.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryWindow<'a> {
    pub vehicle_id: VehicleId,
    pub frame_rate: f64,
    pub frames: &'a [TrackFrame],
}

impl<'a> TrajectoryWindow<'a> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn end_frame(&self) -> u32 {
        self.frames.last().map_or(0, |f| f.frame)
    }

    pub fn window(
        &self,
        end_frame: u32,
        duration_s: f64,
    ) -> Result<TrajectoryWindow<'a>, TrajectoryError> {
        window_of(
            self.vehicle_id,
            self.frames,
            end_frame,
            duration_s,
            self.frame_rate,
        )
    }
}

/// Number of frames spanned by `duration_s` at `frame_rate`.
pub fn frames_for(duration_s: f64, frame_rate: f64) -> usize {
    (duration_s * frame_rate).round().max(0.0) as usize
}

fn window_of<'a>(
    vehicle: VehicleId,
    frames: &'a [TrackFrame],
    end_frame: u32,
    duration_s: f64,
    frame_rate: f64,
) -> Result<TrajectoryWindow<'a>, TrajectoryError> {
    let needed = frames_for(duration_s, frame_rate);
    if needed == 0 {
        return Err(TrajectoryError::EmptyWindow(duration_s));
    }
    let first = frames
        .first()
        .ok_or(TrajectoryError::NotFound {
            vehicle,
            frame: end_frame,
        })?
        .frame;
    if end_frame < first || (end_frame - first) as usize >= frames.len() {
        return Err(TrajectoryError::NotFound {
            vehicle,
            frame: end_frame,
        });
    }
    let end = (end_frame - first) as usize;
    let available = end + 1;
    if available < needed {
        return Err(TrajectoryError::WindowUnderrun {
            vehicle,
            end_frame,
            needed,
            available,
        });
    }
    Ok(TrajectoryWindow {
        vehicle_id: vehicle,
        frame_rate,
        frames: &frames[available - needed..available],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub direction: DrivingDirection,
    /// 0 is the rightmost lane in the travel direction; ranks grow to the left.
    pub rank: usize,
    /// On-ramp or acceleration lane; lane changes out of it are mandatory.
    pub merge: bool,
    /// Lateral center of the lane in the canonical frame.
    pub center_y: f64,
}

/// Derive lanes from the dataset's image-space lane markings.
///
/// Markings are sorted top to bottom. Lane ids count the regions between
/// markings from the top of the image, with the region above the first upper
/// marking and the median each taking one id.
pub fn lanes_from_markings(upper: &[f64], lower: &[f64], merge_ids: &[LaneId]) -> Vec<Lane> {
    let mut lanes = Vec::new();
    let upper_lanes = upper.len().saturating_sub(1);
    for i in 0..upper_lanes {
        let id = i as LaneId + 2;
        // Upper carriageway: left of travel is image-down, so ids ascend right to left.
        lanes.push(Lane {
            id,
            direction: DrivingDirection::Decreasing,
            rank: i,
            merge: merge_ids.contains(&id),
            center_y: 0.5 * (upper[i] + upper[i + 1]),
        });
    }
    let lower_lanes = lower.len().saturating_sub(1);
    for j in 0..lower_lanes {
        let id = upper.len() as LaneId + 2 + j as LaneId;
        lanes.push(Lane {
            id,
            direction: DrivingDirection::Increasing,
            rank: lower_lanes - 1 - j,
            merge: merge_ids.contains(&id),
            center_y: -0.5 * (lower[j] + lower[j + 1]),
        });
    }
    lanes
}

/// Neighbor roles in the fixed channel order used throughout the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    P,
    PL,
    PR,
    FL,
    FR,
    ASL,
    ASR,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::P,
        Role::PL,
        Role::PR,
        Role::FL,
        Role::FR,
        Role::ASL,
        Role::ASR,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::P => "P",
            Role::PL => "PL",
            Role::PR => "PR",
            Role::FL => "FL",
            Role::FR => "FR",
            Role::ASL => "ASL",
            Role::ASR => "ASR",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NeighborSet {
    roles: [Option<VehicleId>; 7],
}

impl NeighborSet {
    pub fn get(&self, role: Role) -> Option<VehicleId> {
        self.roles[role.index()]
    }

    pub fn set(&mut self, role: Role, id: Option<VehicleId>) {
        self.roles[role.index()] = id;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Role, Option<VehicleId>)> + '_ {
        Role::ALL.iter().map(move |&r| (r, self.get(r)))
    }

    pub fn is_empty(&self) -> bool {
        self.roles.iter().all(Option::is_none)
    }

    fn from_ids(ids: &NeighborIds) -> Self {
        let mut set = NeighborSet::default();
        set.set(Role::P, ids.preceding);
        set.set(Role::PL, ids.left_preceding);
        set.set(Role::PR, ids.right_preceding);
        set.set(Role::FL, ids.left_following);
        set.set(Role::FR, ids.right_following);
        set.set(Role::ASL, ids.left_alongside);
        set.set(Role::ASR, ids.right_alongside);
        set
    }
}

/// Everything needed to build a [`Recording`].
#[derive(Debug, Clone, Default)]
pub struct RecordingParts {
    pub id: u32,
    pub frame_rate: f64,
    pub speed_limit: Option<f64>,
    pub upper_markings: Vec<f64>,
    pub lower_markings: Vec<f64>,
    pub merge_lanes: Vec<LaneId>,
    pub tracks: Vec<VehicleTrack>,
    /// Whether frames carry dataset neighbor ids; otherwise roles are resolved geometrically.
    pub neighbor_ids_provided: bool,
}

/// An immutable, validated recording with a per-frame occupancy index.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: u32,
    pub frame_rate: f64,
    pub speed_limit: Option<f64>,
    pub upper_markings: Vec<f64>,
    pub lower_markings: Vec<f64>,
    pub lanes: Vec<Lane>,
    pub tracks: Vec<VehicleTrack>,
    pub neighbor_ids_provided: bool,
    track_index: HashMap<VehicleId, usize>,
    lane_index: HashMap<LaneId, usize>,
    // frame -> (track index, offset into its frames)
    occupancy: HashMap<u32, Vec<(usize, usize)>>,
}

impl Recording {
    pub fn new(parts: RecordingParts) -> Result<Self, TrajectoryError> {
        if !(parts.frame_rate > 0.0 && parts.frame_rate.is_finite()) {
            return Err(TrajectoryError::Invalid(format!(
                "frame rate must be positive, got {}",
                parts.frame_rate
            )));
        }
        let mut merge = parts.merge_lanes.clone();
        merge.sort_unstable();
        merge.dedup();
        let lanes = lanes_from_markings(&parts.upper_markings, &parts.lower_markings, &merge);
        let lane_index: HashMap<LaneId, usize> =
            lanes.iter().enumerate().map(|(i, l)| (l.id, i)).collect();

        let mut tracks = parts.tracks;
        tracks.sort_by_key(|t| t.id);
        let mut track_index = HashMap::with_capacity(tracks.len());
        let mut occupancy: HashMap<u32, Vec<(usize, usize)>> = HashMap::new();
        for (ti, track) in tracks.iter().enumerate() {
            if track_index.insert(track.id, ti).is_some() {
                return Err(TrajectoryError::Integrity {
                    vehicle: track.id,
                    reason: "duplicate track id".into(),
                });
            }
            for (fi, f) in track.frames.iter().enumerate() {
                if f.vehicle_id != track.id {
                    return Err(TrajectoryError::Integrity {
                        vehicle: track.id,
                        reason: format!("frame {} carries vehicle id {}", f.frame, f.vehicle_id),
                    });
                }
                if fi > 0 && f.frame != track.frames[fi - 1].frame + 1 {
                    return Err(TrajectoryError::Integrity {
                        vehicle: track.id,
                        reason: format!(
                            "frames not contiguous: {} follows {}",
                            f.frame,
                            track.frames[fi - 1].frame
                        ),
                    });
                }
                match lane_index.get(&f.lane_id) {
                    Some(&li) if lanes[li].direction == track.direction => {}
                    _ => {
                        return Err(TrajectoryError::Integrity {
                            vehicle: track.id,
                            reason: format!(
                                "frame {} references lane {} not in its carriageway",
                                f.frame, f.lane_id
                            ),
                        })
                    }
                }
                if f.space_headway < 0.0 || f.time_headway < 0.0 {
                    return Err(TrajectoryError::Integrity {
                        vehicle: track.id,
                        reason: format!("negative headway at frame {}", f.frame),
                    });
                }
                occupancy.entry(f.frame).or_default().push((ti, fi));
            }
        }
        Ok(Recording {
            id: parts.id,
            frame_rate: parts.frame_rate,
            speed_limit: parts.speed_limit,
            upper_markings: parts.upper_markings,
            lower_markings: parts.lower_markings,
            lanes,
            tracks,
            neighbor_ids_provided: parts.neighbor_ids_provided,
            track_index,
            lane_index,
            occupancy,
        })
    }

    pub fn into_parts(self) -> RecordingParts {
        let merge_lanes = self.merge_lane_ids();
        RecordingParts {
            id: self.id,
            frame_rate: self.frame_rate,
            speed_limit: self.speed_limit,
            upper_markings: self.upper_markings,
            lower_markings: self.lower_markings,
            merge_lanes,
            tracks: self.tracks,
            neighbor_ids_provided: self.neighbor_ids_provided,
        }
    }

    pub fn merge_lane_ids(&self) -> Vec<LaneId> {
        self.lanes.iter().filter(|l| l.merge).map(|l| l.id).collect()
    }

    pub fn track(&self, id: VehicleId) -> Option<&VehicleTrack> {
        self.track_index.get(&id).map(|&i| &self.tracks[i])
    }

    pub fn lane(&self, id: LaneId) -> Option<&Lane> {
        self.lane_index.get(&id).map(|&i| &self.lanes[i])
    }

    /// The lane `offset` ranks to the left (positive) or right (negative) of `id`.
    pub fn adjacent_lane(&self, id: LaneId, offset: isize) -> Option<&Lane> {
        let lane = self.lane(id)?;
        let rank = lane.rank as isize + offset;
        if rank < 0 {
            return None;
        }
        self.lanes
            .iter()
            .find(|l| l.direction == lane.direction && l.rank == rank as usize)
    }

    pub fn frame_of(&self, vehicle: VehicleId, frame: u32) -> Result<&TrackFrame, TrajectoryError> {
        self.track(vehicle)
            .and_then(|t| t.frame_at(frame))
            .ok_or(TrajectoryError::NotFound { vehicle, frame })
    }

    /// All vehicles present at `frame` as (track, frame state) pairs.
    pub fn scene(&self, frame: u32) -> impl Iterator<Item = (&VehicleTrack, &TrackFrame)> + '_ {
        self.occupancy
            .get(&frame)
            .into_iter()
            .flatten()
            .map(move |&(ti, fi)| (&self.tracks[ti], &self.tracks[ti].frames[fi]))
    }

    pub fn frame_range(&self) -> Option<(u32, u32)> {
        let lo = self.tracks.iter().map(|t| t.first_frame()).min()?;
        let hi = self.tracks.iter().map(|t| t.last_frame()).max()?;
        Some((lo, hi))
    }

    pub fn total_frames(&self) -> usize {
        self.tracks.iter().map(|t| t.frames.len()).sum()
    }

    /// Neighbor roles of `ego` at `frame`.
    pub fn neighbors(&self, ego: VehicleId, frame: u32) -> Result<NeighborSet, TrajectoryError> {
        let state = self.frame_of(ego, frame)?;
        if self.neighbor_ids_provided {
            Ok(NeighborSet::from_ids(&state.neighbors))
        } else {
            self.geometric_neighbors(ego, frame)
        }
    }

    /// Resolve neighbor roles from positions alone, ignoring any dataset ids.
    pub fn geometric_neighbors(
        &self,
        ego: VehicleId,
        frame: u32,
    ) -> Result<NeighborSet, TrajectoryError> {
        let ego_track = self
            .track(ego)
            .ok_or(TrajectoryError::NotFound { vehicle: ego, frame })?;
        let ego_state = ego_track
            .frame_at(frame)
            .ok_or(TrajectoryError::NotFound { vehicle: ego, frame })?;
        let ego_lane = self.lane(ego_state.lane_id).ok_or_else(|| {
            TrajectoryError::Invalid(format!("unknown lane {}", ego_state.lane_id))
        })?;
        let ego_rear = ego_state.x - ego_track.length;

        // (distance, id) of the best candidate per role
        let mut best: [Option<(f64, VehicleId)>; 7] = [None; 7];
        let mut offer = |role: Role, dist: f64, id: VehicleId| {
            let slot = &mut best[role.index()];
            let better = match *slot {
                None => true,
                Some((d, other)) => dist < d || (dist == d && id < other),
            };
            if better {
                *slot = Some((dist, id));
            }
        };

        for (track, state) in self.scene(frame) {
            if track.id == ego || track.direction != ego_track.direction {
                continue;
            }
            let Some(lane) = self.lane(state.lane_id) else {
                continue;
            };
            let lane_offset = lane.rank as isize - ego_lane.rank as isize;
            let dx = state.x - ego_state.x;
            let overlaps = state.x - track.length < ego_state.x && ego_rear < state.x;
            match lane_offset {
                0 => {
                    if dx > 0.0 {
                        offer(Role::P, dx, track.id);
                    }
                }
                1 | -1 => {
                    let left = lane_offset == 1;
                    let role = if overlaps {
                        if left {
                            Role::ASL
                        } else {
                            Role::ASR
                        }
                    } else if dx > 0.0 {
                        if left {
                            Role::PL
                        } else {
                            Role::PR
                        }
                    } else if left {
                        Role::FL
                    } else {
                        Role::FR
                    };
                    offer(role, dx.abs(), track.id);
                }
                _ => {}
            }
        }
        let mut set = NeighborSet::default();
        for role in Role::ALL {
            set.set(role, best[role.index()].map(|(_, id)| id));
        }
        Ok(set)
    }

    /// Fill every frame's neighbor ids, headways and TTC from geometry.
    ///
    /// Used for recordings produced without dataset-provided neighbor data.
    pub fn with_geometric_annotations(self) -> Result<Recording, TrajectoryError> {
        let mut annotated = Vec::with_capacity(self.tracks.len());
        for track in &self.tracks {
            let mut t = track.clone();
            for f in &mut t.frames {
                let set = self.geometric_neighbors(track.id, f.frame)?;
                let following = self.geometric_follower(track.id, f.frame)?;
                f.neighbors = NeighborIds {
                    preceding: set.get(Role::P),
                    following,
                    left_preceding: set.get(Role::PL),
                    left_alongside: set.get(Role::ASL),
                    left_following: set.get(Role::FL),
                    right_preceding: set.get(Role::PR),
                    right_alongside: set.get(Role::ASR),
                    right_following: set.get(Role::FR),
                };
                match set.get(Role::P) {
                    Some(p) => {
                        let leader = self.frame_of(p, f.frame)?;
                        f.space_headway = leader.x - f.x;
                        f.time_headway = if f.vx > 0.0 {
                            f.space_headway / f.vx
                        } else {
                            0.0
                        };
                        f.ttc = if f.vx != leader.vx {
                            (leader.x - f.x) / (f.vx - leader.vx)
                        } else {
                            0.0
                        };
                    }
                    None => {
                        f.space_headway = 0.0;
                        f.time_headway = 0.0;
                        f.ttc = 0.0;
                    }
                }
            }
            annotated.push(t);
        }
        let mut parts = self.into_parts();
        parts.tracks = annotated;
        parts.neighbor_ids_provided = true;
        Recording::new(parts)
    }

    fn geometric_follower(
        &self,
        ego: VehicleId,
        frame: u32,
    ) -> Result<Option<VehicleId>, TrajectoryError> {
        let ego_state = self.frame_of(ego, frame)?;
        let ego_track = self.track(ego).expect("checked above");
        let mut best: Option<(f64, VehicleId)> = None;
        for (track, state) in self.scene(frame) {
            if track.id == ego
                || track.direction != ego_track.direction
                || state.lane_id != ego_state.lane_id
            {
                continue;
            }
            let dx = ego_state.x - state.x;
            if dx > 0.0 && best.map_or(true, |(d, id)| dx < d || (dx == d && track.id < id)) {
                best = Some((dx, track.id));
            }
        }
        Ok(best.map(|(_, id)| id))
    }
}
