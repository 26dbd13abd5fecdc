//! Style-parameterized synthetic highway traffic.
//!
//! Longitudinal motion follows the Intelligent Driver Model and lane choice
//! follows MOBIL. Each driver draws a style from a mixture; the style sets
//! car-following parameters, the lane-change threshold, and how noisy the
//! driver's acceleration and lane keeping are. Lane changes are logged with
//! their decision, onset, crossing and completion frames.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{write_recording, IngestError, RecordingPaths};
use crate::labeling::ChangeDirection;
use crate::trajectory::{
    frames_for, DrivingDirection, NeighborIds, Recording, RecordingParts, TrackFrame,
    TrajectoryError, VehicleClass, VehicleId, VehicleTrack,
};

pub const SIM_FRAME_RATE: f64 = 25.0;
pub const LANE_WIDTH: f64 = 3.75;
const FIRST_MARKING_Y: f64 = 10.0;

const IDM_MIN_GAP: f64 = 2.0;
const IDM_DELTA: f64 = 4.0;
/// Deceleration MOBIL may impose on anyone, m/s².
const SAFE_DECEL: f64 = 4.0;
/// Smallest bumper gap the integrator lets through.
const HARD_MIN_GAP: f64 = 0.5;

const MAX_PENDING: usize = 100;
const MAX_SPAWN_PER_LANE: f64 = 1.0;
const WARMUP_S: f64 = 3.0;
const COOLDOWN_S: f64 = 3.0;
const NOISE_TAU_S: f64 = 1.5;
const SWAY_FREQ_HZ: f64 = 0.2;

pub const GROUND_TRUTH_COLUMNS: [&str; 7] = [
    "vehicle_id",
    "t_decision_frame",
    "t_start_frame",
    "t_cross_frame",
    "t_end_frame",
    "direction",
    "style_index",
];

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("road saturated: {pending} vehicles waiting to enter at frame {frame}")]
    Saturated { pending: usize, frame: u32 },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: malformed ground truth: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverStyleParams {
    pub aggressiveness: f64,
    pub desired_speed: f64,
    pub desired_time_headway: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub politeness: f64,
    pub lane_change_threshold: f64,
    pub reaction_time: f64,
}

impl DriverStyleParams {
    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: &str| Err(GenerationError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.aggressiveness) {
            return bad("aggressiveness must lie in [0, 1]");
        }
        if !(self.desired_speed > 0.0) {
            return bad("desired_speed must be positive");
        }
        if !(self.desired_time_headway > 0.0) {
            return bad("desired_time_headway must be positive");
        }
        if !(self.max_accel > 0.0) {
            return bad("max_accel must be positive");
        }
        if !(self.comfortable_decel > 0.0) {
            return bad("comfortable_decel must be positive");
        }
        if !(0.0..=1.0).contains(&self.politeness) {
            return bad("politeness must lie in [0, 1]");
        }
        if !self.lane_change_threshold.is_finite() {
            return bad("lane_change_threshold must be finite");
        }
        if !(self.reaction_time >= 0.0) {
            return bad("reaction_time must be non-negative");
        }
        Ok(())
    }

    /// Duration of the lateral blend, 3 s for the most aggressive drivers up to 5 s.
    pub fn lane_change_duration_s(&self) -> f64 {
        3.0 + 2.0 * (1.0 - self.aggressiveness)
    }

    /// Stationary standard deviation of the acceleration noise, m/s².
    pub fn accel_noise_std(&self) -> f64 {
        0.5 * self.aggressiveness
    }

    /// Lane-keeping sway amplitude; peak lateral speed stays below 0.07 m/s.
    pub fn sway_amplitude(&self) -> f64 {
        (0.01 + 0.04 * self.aggressiveness) * 1.4 / (2.0 * PI * SWAY_FREQ_HZ)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleShare {
    pub probability: f64,
    pub style: DriverStyleParams,
}

fn default_recording_id() -> u32 {
    1
}

fn default_keep_right_bias() -> f64 {
    0.3
}

fn default_speed_spread() -> f64 {
    0.15
}

fn default_entry_speed_ratio() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_recording_id")]
    pub recording_id: u32,
    pub lane_count: usize,
    pub road_length: f64,
    pub duration: f64,
    pub spawn_rate: f64,
    pub style_mixture: Vec<StyleShare>,
    pub rng_seed: u64,
    /// MOBIL bias toward the right lane, m/s².
    #[serde(default = "default_keep_right_bias")]
    pub keep_right_bias: f64,
    /// Relative half-width of the uniform spread of desired speeds.
    #[serde(default = "default_speed_spread")]
    pub speed_spread: f64,
    /// Entry speed as a fraction of desired speed on a free road.
    #[serde(default = "default_entry_speed_ratio")]
    pub entry_speed_ratio: f64,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, GenerationError> {
        toml::from_str(text).map_err(|e| GenerationError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: String| Err(GenerationError::Config(m));
        if self.lane_count < 2 {
            return bad(format!("lane_count must be at least 2, got {}", self.lane_count));
        }
        if !(self.road_length >= 100.0) {
            return bad("road_length must be at least 100 m".into());
        }
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        if !(self.spawn_rate >= 0.0) {
            return bad("spawn_rate must be non-negative".into());
        }
        if self.spawn_rate > MAX_SPAWN_PER_LANE * self.lane_count as f64 {
            return bad(format!(
                "spawn_rate {} veh/s saturates {} lanes",
                self.spawn_rate, self.lane_count
            ));
        }
        if self.style_mixture.is_empty() {
            return bad("style_mixture is empty".into());
        }
        let total: f64 = self.style_mixture.iter().map(|s| s.probability).sum();
        if self.style_mixture.iter().any(|s| !(s.probability >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("style probabilities must be non-negative and sum to 1, got {total}"));
        }
        for s in &self.style_mixture {
            s.style.validate()?;
        }
        if !(self.keep_right_bias >= 0.0) {
            return bad("keep_right_bias must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.speed_spread) {
            return bad("speed_spread must lie in [0, 1)".into());
        }
        if !(self.entry_speed_ratio > 0.0 && self.entry_speed_ratio <= 1.0) {
            return bad("entry_speed_ratio must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn markings(&self) -> Vec<f64> {
        (0..=self.lane_count)
            .map(|j| FIRST_MARKING_Y + j as f64 * LANE_WIDTH)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthEvent {
    pub vehicle_id: VehicleId,
    pub t_decision: u32,
    pub t_start: u32,
    pub t_cross: u32,
    pub t_end: u32,
    pub direction: ChangeDirection,
    pub style_index: usize,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub recording: Recording,
    pub ground_truth: Vec<GroundTruthEvent>,
    pub vehicle_styles: BTreeMap<VehicleId, usize>,
    /// Lane changes completed during the run.
    pub lane_change_count: usize,
    /// Integration steps where the hard gap floor had to intervene.
    pub gap_interventions: usize,
}

#[derive(Debug, Clone, Copy)]
enum Maneuver {
    Keep,
    Pending {
        target: usize,
        decision: u32,
        start: u32,
    },
    Changing {
        from: usize,
        to: usize,
        decision: u32,
        start: u32,
        end: u32,
        cross: Option<u32>,
    },
}

#[derive(Debug, Clone)]
struct Vehicle {
    id: VehicleId,
    style: usize,
    p: DriverStyleParams,
    length: f64,
    width: f64,
    lane: usize,
    x: f64,
    v: f64,
    noise: f64,
    sway_phase: f64,
    spawn_frame: u32,
    quiet_until: u32,
    maneuver: Maneuver,
    frames: Vec<TrackFrame>,
}

impl Vehicle {
    fn occupies(&self, lane: usize) -> bool {
        match self.maneuver {
            Maneuver::Changing { from, to, .. } => lane == from || lane == to,
            _ => lane == self.lane,
        }
    }

    fn rear(&self) -> f64 {
        self.x - self.length
    }
}

fn lane_center(lane: usize) -> f64 {
    -(FIRST_MARKING_Y + (lane as f64 + 0.5) * LANE_WIDTH)
}

/// IDM acceleration, with `lead` as (bumper gap, leader speed).
fn idm(p: &DriverStyleParams, v: f64, lead: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / p.desired_speed).powf(IDM_DELTA);
    match lead {
        None => p.max_accel * free,
        Some((gap, vl)) => {
            let s_star = IDM_MIN_GAP
                + (v * p.desired_time_headway + v * (v - vl) / (2.0 * (p.max_accel * p.comfortable_decel).sqrt()))
                    .max(0.0);
            let s = gap.max(0.1);
            p.max_accel * (free - (s_star / s).powi(2))
        }
    }
}

/// Vehicles occupying each lane, sorted by front position.
fn lane_lists(vehicles: &[Vehicle], lanes: usize) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); lanes];
    for (i, v) in vehicles.iter().enumerate() {
        for (l, list) in lists.iter_mut().enumerate() {
            if v.occupies(l) {
                list.push(i);
            }
        }
    }
    for list in &mut lists {
        list.sort_by(|&a, &b| vehicles[a].x.total_cmp(&vehicles[b].x).then(vehicles[a].id.cmp(&vehicles[b].id)));
    }
    lists
}

/// Nearest vehicles ahead and behind `ego` in `list`, excluding `ego`.
/// `None` in the outer option means some vehicle overlaps the ego body.
fn gap_neighbors(vehicles: &[Vehicle], list: &[usize], ego: usize) -> Option<(Option<usize>, Option<usize>)> {
    let e = &vehicles[ego];
    let mut lead = None;
    let mut follow = None;
    for &j in list {
        if j == ego {
            continue;
        }
        let o = &vehicles[j];
        if o.rear() >= e.x {
            if lead.map_or(true, |l: usize| o.x < vehicles[l].x) {
                lead = Some(j);
            }
        } else if o.x <= e.rear() {
            if follow.map_or(true, |f: usize| o.x > vehicles[f].x) {
                follow = Some(j);
            }
        } else {
            return None;
        }
    }
    Some((lead, follow))
}

fn lead_of(vehicles: &[Vehicle], behind: usize, ahead: Option<usize>) -> Option<(f64, f64)> {
    ahead.map(|a| (vehicles[a].rear() - vehicles[behind].x, vehicles[a].v))
}

fn accel_in(vehicles: &[Vehicle], i: usize, ahead: Option<usize>) -> f64 {
    idm(&vehicles[i].p, vehicles[i].v, lead_of(vehicles, i, ahead))
}

/// Acceleration of `f` if `leader` were directly ahead of it.
fn accel_behind(vehicles: &[Vehicle], f: usize, leader: Option<usize>) -> f64 {
    accel_in(vehicles, f, leader)
}

struct Candidate {
    target: usize,
    incentive: f64,
}

/// MOBIL evaluation of moving `i` into `target`. Returns the incentive when
/// the safety criterion holds.
fn mobil(vehicles: &[Vehicle], lists: &[Vec<usize>], i: usize, target: usize, bias: f64) -> Option<f64> {
    let e = &vehicles[i];
    let (new_lead, new_follow) = gap_neighbors(vehicles, &lists[target], i)?;
    let (old_lead, old_follow) = gap_neighbors(vehicles, &lists[e.lane], i)?;
    let a_self = accel_in(vehicles, i, old_lead);
    let a_self_new = accel_in(vehicles, i, new_lead);
    if a_self_new < -SAFE_DECEL {
        return None;
    }
    let mut others = 0.0;
    if let Some(f) = new_follow {
        let after = accel_behind(vehicles, f, Some(i));
        if after < -SAFE_DECEL {
            return None;
        }
        others += after - accel_behind(vehicles, f, new_lead);
    }
    if let Some(f) = old_follow {
        others += accel_behind(vehicles, f, old_lead) - accel_behind(vehicles, f, Some(i));
    }
    let toward_right = target > e.lane;
    let bias = if toward_right { bias } else { -bias };
    Some(a_self_new - a_self + e.p.politeness * others + bias)
}

fn safe_to_start(vehicles: &[Vehicle], lists: &[Vec<usize>], i: usize, target: usize) -> bool {
    let Some((lead, follow)) = gap_neighbors(vehicles, &lists[target], i) else {
        return false;
    };
    accel_in(vehicles, i, lead) >= -SAFE_DECEL
        && follow.map_or(true, |f| accel_behind(vehicles, f, Some(i)) >= -SAFE_DECEL)
}

fn pick_style(mixture: &[StyleShare], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, s) in mixture.iter().enumerate() {
        acc += s.probability;
        if u < acc {
            return i;
        }
    }
    mixture.len() - 1
}

/// Run the scenario.
pub fn generate(config: &ScenarioConfig) -> Result<Generated, GenerationError> {
    config.validate()?;
    let fps = SIM_FRAME_RATE;
    let dt = 1.0 / fps;
    let lanes = config.lane_count;
    let n_frames = frames_for(config.duration, fps) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let arrivals = (config.spawn_rate > 0.0).then(|| Exp::new(config.spawn_rate).expect("positive rate"));
    let mut next_arrival = arrivals.as_ref().map_or(f64::INFINITY, |d| d.sample(&mut rng));
    let mut queues: Vec<Vec<Vehicle>> = vec![Vec::new(); lanes];
    let mut active: Vec<Vehicle> = Vec::new();
    let mut done: Vec<Vehicle> = Vec::new();
    let mut ground_truth = Vec::new();
    let mut vehicle_styles = BTreeMap::new();
    let mut next_id: VehicleId = 1;
    let mut gap_interventions = 0;
    let warmup = frames_for(WARMUP_S, fps) as u32;
    let cooldown = frames_for(COOLDOWN_S, fps) as u32;
    let noise_decay = (-dt / NOISE_TAU_S).exp();
    let noise_gain = (1.0 - noise_decay * noise_decay).sqrt();

    for k in 0..n_frames {
        let t = k as f64 * dt;
        while next_arrival <= t {
            let style = pick_style(&config.style_mixture, rng.gen::<f64>());
            let mut p = config.style_mixture[style].style.clone();
            p.desired_speed *= 1.0 + rng.gen_range(-1.0..=1.0) * config.speed_spread;
            let lane = rng.gen_range(0..lanes);
            let length = rng.gen_range(4.2..5.0);
            queues[lane].push(Vehicle {
                id: next_id,
                style,
                p,
                length,
                width: rng.gen_range(1.7..2.0),
                lane,
                x: length,
                v: 0.0,
                noise: 0.0,
                sway_phase: rng.gen_range(0.0..2.0 * PI),
                spawn_frame: 0,
                quiet_until: 0,
                maneuver: Maneuver::Keep,
                frames: Vec::new(),
            });
            vehicle_styles.insert(next_id, style);
            next_id += 1;
            next_arrival += arrivals.as_ref().expect("arrivals scheduled").sample(&mut rng);
        }
        for (lane, queue) in queues.iter_mut().enumerate() {
            if queue.is_empty() {
                continue;
            }
            let last = active
                .iter()
                .filter(|v| v.occupies(lane))
                .min_by(|a, b| a.x.total_cmp(&b.x));
            let head = &queue[0];
            let free_speed = head.p.desired_speed * config.entry_speed_ratio;
            let (gap, speed) = match last {
                None => (f64::INFINITY, free_speed),
                Some(l) => {
                    let gap = l.rear() - head.length;
                    let near = gap < 2.0 * head.p.desired_speed * head.p.desired_time_headway + 50.0;
                    (gap, if near { free_speed.min(l.v) } else { free_speed })
                }
            };
            if gap >= IDM_MIN_GAP + speed * head.p.desired_time_headway {
                let mut v = queue.remove(0);
                v.v = speed;
                v.spawn_frame = k;
                v.quiet_until = k + warmup;
                active.push(v);
            }
        }
        let pending: usize = queues.iter().map(Vec::len).sum();
        if pending > MAX_PENDING {
            return Err(GenerationError::Saturated { pending, frame: k });
        }

        // Lateral progress of ongoing maneuvers.
        for v in active.iter_mut() {
            if let Maneuver::Changing { from, to, decision, start, end, cross } = v.maneuver {
                let s = (k - start) as f64 / (end - start) as f64;
                let cross = if s >= 0.5 && cross.is_none() {
                    v.lane = to;
                    Some(k)
                } else {
                    cross
                };
                if k >= end {
                    ground_truth.push(GroundTruthEvent {
                        vehicle_id: v.id,
                        t_decision: decision,
                        t_start: start,
                        t_cross: cross.expect("crossed before completion"),
                        t_end: end,
                        direction: if to < from { ChangeDirection::Left } else { ChangeDirection::Right },
                        style_index: v.style,
                    });
                    v.maneuver = Maneuver::Keep;
                    v.quiet_until = k + cooldown;
                } else {
                    v.maneuver = Maneuver::Changing { from, to, decision, start, end, cross };
                }
            }
        }

        let mut lists = lane_lists(&active, lanes);
        let mut accel = vec![0.0; active.len()];
        for i in 0..active.len() {
            let occupied: Vec<usize> = (0..lanes).filter(|&l| active[i].occupies(l)).collect();
            let mut a = f64::INFINITY;
            for l in occupied {
                let lead = gap_neighbors(&active, &lists[l], i).and_then(|(lead, _)| lead);
                a = a.min(accel_in(&active, i, lead));
            }
            accel[i] = a;
        }

        for i in 0..active.len() {
            match active[i].maneuver {
                Maneuver::Keep => {
                    let v = &active[i];
                    let react = frames_for(v.p.reaction_time, fps) as u32;
                    let dur = frames_for(v.p.lane_change_duration_s(), fps) as u32;
                    let room = v.x + v.v * (v.p.reaction_time + v.p.lane_change_duration_s() + 1.0) < config.road_length;
                    if k < v.quiet_until || !room || k + react + dur + 1 >= n_frames {
                        continue;
                    }
                    let mut best: Option<Candidate> = None;
                    let targets = [v.lane.checked_sub(1), (v.lane + 1 < lanes).then_some(v.lane + 1)];
                    for target in targets.into_iter().flatten() {
                        if let Some(incentive) = mobil(&active, &lists, i, target, config.keep_right_bias) {
                            if incentive > v.p.lane_change_threshold
                                && best.as_ref().map_or(true, |b| incentive > b.incentive)
                            {
                                best = Some(Candidate { target, incentive });
                            }
                        }
                    }
                    if let Some(c) = best {
                        active[i].maneuver = Maneuver::Pending {
                            target: c.target,
                            decision: k,
                            start: k + react,
                        };
                    }
                }
                Maneuver::Pending { target, decision, start } if start == k => {
                    if safe_to_start(&active, &lists, i, target) {
                        let dur = frames_for(active[i].p.lane_change_duration_s(), fps).max(2) as u32;
                        let from = active[i].lane;
                        active[i].maneuver = Maneuver::Changing {
                            from,
                            to: target,
                            decision,
                            start: k,
                            end: k + dur,
                            cross: None,
                        };
                        lists[target].push(i);
                        let xs: Vec<f64> = active.iter().map(|v| v.x).collect();
                        lists[target].sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
                    } else {
                        active[i].maneuver = Maneuver::Keep;
                        active[i].quiet_until = k + cooldown;
                    }
                }
                _ => {}
            }
        }
        // Starting a change this frame tightens the new lane for everyone in it.
        for i in 0..active.len() {
            if let Maneuver::Changing { to, start, .. } = active[i].maneuver {
                if start == k {
                    let lead = gap_neighbors(&active, &lists[to], i).and_then(|(lead, _)| lead);
                    accel[i] = accel[i].min(accel_in(&active, i, lead));
                    if let Some((_, Some(f))) = gap_neighbors(&active, &lists[to], i) {
                        accel[f] = accel[f].min(accel_behind(&active, f, Some(i)));
                    }
                }
            }
        }

        for (i, v) in active.iter_mut().enumerate() {
            let a = accel[i] + v.noise;
            let (y, vy, ay) = lateral_state(v, k, dt);
            v.frames.push(TrackFrame {
                frame: k,
                vehicle_id: v.id,
                x: v.x,
                y,
                vx: v.v,
                vy,
                ax: a,
                ay,
                lane_id: 2 + v.lane as i32,
                space_headway: 0.0,
                time_headway: 0.0,
                ttc: 0.0,
                neighbors: NeighborIds::default(),
            });
            let v_new = (v.v + a * dt).max(0.0);
            v.x += 0.5 * (v.v + v_new) * dt;
            v.v = v_new;
            let z: f64 = StandardNormal.sample(&mut rng);
            v.noise = v.noise * noise_decay + v.p.accel_noise_std() * noise_gain * z;
        }

        let lists = lane_lists(&active, lanes);
        for list in &lists {
            for w in list.windows(2) {
                let (f, l) = (w[0], w[1]);
                let limit = active[l].rear() - HARD_MIN_GAP;
                if active[f].x > limit {
                    gap_interventions += 1;
                    active[f].x = limit;
                    active[f].v = active[f].v.min(active[l].v);
                }
            }
        }

        let mut i = 0;
        while i < active.len() {
            if active[i].x > config.road_length && !matches!(active[i].maneuver, Maneuver::Changing { .. }) {
                done.push(active.swap_remove(i));
            } else {
                i += 1;
            }
        }
        active.sort_by_key(|v| v.id);
    }
    done.extend(active);
    done.sort_by_key(|v| v.id);

    let tracks = done
        .into_iter()
        .filter(|v| !v.frames.is_empty())
        .map(|v| VehicleTrack {
            id: v.id,
            class: VehicleClass::Car,
            direction: DrivingDirection::Increasing,
            width: v.width,
            length: v.length,
            frames: v.frames,
        })
        .collect::<Vec<_>>();
    vehicle_styles.retain(|id, _| tracks.iter().any(|t| t.id == *id));
    let recording = Recording::new(RecordingParts {
        id: config.recording_id,
        frame_rate: fps,
        speed_limit: None,
        upper_markings: vec![],
        lower_markings: config.markings(),
        merge_lanes: vec![],
        tracks,
        neighbor_ids_provided: false,
    })?
    .with_geometric_annotations()?;
    ground_truth.sort_by_key(|e: &GroundTruthEvent| (e.vehicle_id, e.t_start));
    Ok(Generated {
        recording,
        lane_change_count: ground_truth.len(),
        ground_truth,
        vehicle_styles,
        gap_interventions,
    })
}

/// Lateral position, speed and acceleration at frame `k`.
fn lateral_state(v: &Vehicle, k: u32, dt: f64) -> (f64, f64, f64) {
    let omega = 2.0 * PI * SWAY_FREQ_HZ;
    let amp = v.p.sway_amplitude();
    let phase = omega * k as f64 * dt + v.sway_phase;
    let (mut y, mut vy, mut ay) = (amp * phase.sin(), amp * omega * phase.cos(), -amp * omega * omega * phase.sin());
    match v.maneuver {
        Maneuver::Changing { from, to, start, end, .. } => {
            let d = (end - start) as f64 * dt;
            let s = (k - start) as f64 * dt / d;
            let (y0, y1) = (lane_center(from), lane_center(to));
            let dy = y1 - y0;
            y += y0 + dy * (3.0 * s * s - 2.0 * s * s * s);
            vy += dy * 6.0 * s * (1.0 - s) / d;
            ay += dy * (6.0 - 12.0 * s) / (d * d);
        }
        _ => y += lane_center(v.lane),
    }
    (y, vy, ay)
}

pub fn ground_truth_path(dir: impl AsRef<Path>, recording_id: u32) -> PathBuf {
    dir.as_ref()
        .join(format!("{recording_id:02}_groundTruthLaneChanges.csv"))
}

pub fn export_ground_truth(events: &[GroundTruthEvent], path: &Path) -> Result<(), GenerationError> {
    let csv_err = |source| GenerationError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(GROUND_TRUTH_COLUMNS).map_err(csv_err)?;
    for e in events {
        w.write_record([
            e.vehicle_id.to_string(),
            e.t_decision.to_string(),
            e.t_start.to_string(),
            e.t_cross.to_string(),
            e.t_end.to_string(),
            e.direction.as_str().to_string(),
            e.style_index.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthEvent>, GenerationError> {
    let csv_err = |source| GenerationError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let fmt = |reason: String| GenerationError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(GROUND_TRUTH_COLUMNS) {
        return Err(fmt(format!("unexpected header {:?}", header)));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<u32, GenerationError> {
            rec[i]
                .parse()
                .map_err(|_| fmt(format!("row {}: bad {}", line + 1, GROUND_TRUTH_COLUMNS[i])))
        };
        out.push(GroundTruthEvent {
            vehicle_id: num(0)?,
            t_decision: num(1)?,
            t_start: num(2)?,
            t_cross: num(3)?,
            t_end: num(4)?,
            direction: ChangeDirection::parse(&rec[5])
                .ok_or_else(|| fmt(format!("row {}: bad direction", line + 1)))?,
            style_index: num(6)? as usize,
        });
    }
    Ok(out)
}

/// Write the recording in dataset layout plus its ground-truth sidecar.
pub fn write_generated(generated: &Generated, dir: &Path) -> Result<RecordingPaths, GenerationError> {
    std::fs::create_dir_all(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let paths = RecordingPaths::in_dir(dir, generated.recording.id);
    write_recording(&generated.recording, &paths)?;
    export_ground_truth(&generated.ground_truth, &ground_truth_path(dir, generated.recording.id))?;
    Ok(paths)
}

#[cfg(test)]
pub(crate) mod presets {
    use super::*;

    pub fn style(aggressiveness: f64, threshold: f64) -> DriverStyleParams {
        DriverStyleParams {
            aggressiveness,
            desired_speed: 30.0,
            desired_time_headway: 1.8 - aggressiveness,
            max_accel: 1.0 + aggressiveness,
            comfortable_decel: 1.5 + aggressiveness,
            politeness: 0.5 - 0.4 * aggressiveness,
            lane_change_threshold: threshold,
            reaction_time: 1.0,
        }
    }

    pub fn two_style(seed: u64, duration: f64, spawn_rate: f64) -> ScenarioConfig {
        ScenarioConfig {
            recording_id: 1,
            lane_count: 3,
            road_length: 800.0,
            duration,
            spawn_rate,
            style_mixture: vec![
                StyleShare {
                    probability: 0.5,
                    style: style(0.9, 0.1),
                },
                StyleShare {
                    probability: 0.5,
                    style: style(0.1, 1.0),
                },
            ],
            rng_seed: seed,
            keep_right_bias: 0.3,
            speed_spread: 0.2,
            entry_speed_ratio: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    #[test]
    fn zero_spawn_rate_gives_empty_recording() {
        let g = generate(&two_style(1, 30.0, 0.0)).unwrap();
        assert!(g.recording.tracks.is_empty());
        assert!(g.ground_truth.is_empty());
    }

    #[test]
    fn free_road_converges_to_desired_speed() {
        let mut cfg = two_style(21, 150.0, 0.01);
        cfg.style_mixture = vec![StyleShare {
            probability: 1.0,
            style: style(0.0, 0.5),
        }];
        cfg.road_length = 5000.0;
        cfg.speed_spread = 0.0;
        cfg.entry_speed_ratio = 0.7;
        let g = generate(&cfg).unwrap();
        assert_eq!(g.recording.tracks.len(), 1, "seed must give one vehicle");
        let t = &g.recording.tracks[0];
        assert!(t.frames.len() > 1500);
        let tail = &t.frames[t.frames.len() - 250..];
        assert!(tail.iter().all(|f| (f.vx - 30.0).abs() <= 0.3), "{}", tail[0].vx);
        assert!(g.ground_truth.is_empty());
        assert!(t.frames.iter().all(|f| f.lane_id == t.frames[0].lane_id));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = two_style(1, 10.0, 0.5);
        cfg.lane_count = 1;
        assert!(matches!(generate(&cfg), Err(GenerationError::Config(_))));
        let mut cfg = two_style(1, 10.0, 0.5);
        cfg.style_mixture[0].probability = 0.6;
        assert!(matches!(generate(&cfg), Err(GenerationError::Config(_))));
        let mut cfg = two_style(1, 10.0, 0.5);
        cfg.spawn_rate = 3.5;
        assert!(matches!(generate(&cfg), Err(GenerationError::Config(_))));
        let mut cfg = two_style(1, 10.0, 0.5);
        cfg.style_mixture[1].style.politeness = 1.5;
        assert!(matches!(generate(&cfg), Err(GenerationError::Config(_))));
    }

    #[test]
    fn saturating_inflow_fails() {
        let mut cfg = two_style(1, 300.0, 3.0);
        cfg.style_mixture.iter_mut().for_each(|s| s.style.desired_time_headway = 3.0);
        assert!(matches!(generate(&cfg), Err(GenerationError::Saturated { .. })));
    }

    #[test]
    fn ground_truth_is_ordered_and_counted() {
        let g = generate(&two_style(3, 180.0, 1.2)).unwrap();
        assert!(!g.ground_truth.is_empty());
        assert_eq!(g.ground_truth.len(), g.lane_change_count);
        for e in &g.ground_truth {
            assert!(e.t_decision <= e.t_start && e.t_start <= e.t_cross && e.t_cross <= e.t_end);
            assert_eq!(e.t_start - e.t_decision, 25);
            let t = g.recording.track(e.vehicle_id).unwrap();
            let before = t.frame_at(e.t_cross - 1).unwrap().lane_id;
            let after = t.frame_at(e.t_cross).unwrap().lane_id;
            let left = g.recording.lane(after).unwrap().rank > g.recording.lane(before).unwrap().rank;
            assert_eq!(left, e.direction == ChangeDirection::Left);
        }
    }

    #[test]
    fn no_same_lane_overlap() {
        let g = generate(&two_style(4, 180.0, 1.5)).unwrap();
        let rec = &g.recording;
        let (lo, hi) = rec.frame_range().unwrap();
        for frame in lo..=hi {
            let mut scene: Vec<_> = rec.scene(frame).collect();
            scene.sort_by(|a, b| a.1.x.total_cmp(&b.1.x));
            for (i, (_, f)) in scene.iter().enumerate() {
                for (lt, l) in &scene[i + 1..] {
                    if l.lane_id == f.lane_id {
                        assert!(l.x - lt.length - f.x > 0.0, "overlap at frame {frame}");
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn lateral_speed_stays_below_onset_while_keeping() {
        let g = generate(&two_style(6, 120.0, 0.8)).unwrap();
        for t in &g.recording.tracks {
            let changes: Vec<_> = g.ground_truth.iter().filter(|e| e.vehicle_id == t.id).collect();
            for f in &t.frames {
                if changes.iter().all(|e| f.frame < e.t_start || f.frame > e.t_end) {
                    assert!(f.vy.abs() < 0.1, "vehicle {} frame {} vy {}", t.id, f.frame, f.vy);
                }
            }
        }
    }

    #[test]
    fn ground_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        export_ground_truth(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert!(read_ground_truth(&path).unwrap().is_empty());
        let g = generate(&two_style(3, 120.0, 1.2)).unwrap();
        export_ground_truth(&g.ground_truth, &path).unwrap();
        assert_eq!(read_ground_truth(&path).unwrap(), g.ground_truth);
    }

    #[test]
    fn toml_config_parses() {
        let text = r#"
lane_count = 3
road_length = 800.0
duration = 60.0
spawn_rate = 0.5
rng_seed = 9

[[style_mixture]]
probability = 1.0
[style_mixture.style]
aggressiveness = 0.5
desired_speed = 30.0
desired_time_headway = 1.2
max_accel = 1.5
comfortable_decel = 2.0
politeness = 0.3
lane_change_threshold = 0.2
reaction_time = 1.0
"#;
        let cfg = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(cfg.recording_id, 1);
        assert_eq!(cfg.keep_right_bias, 0.3);
        cfg.validate().unwrap();
        assert!(ScenarioConfig::from_toml(&text.replace("rng_seed", "rng_sed")).is_err());
    }
}
