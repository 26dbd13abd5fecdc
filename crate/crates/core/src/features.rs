//! Driving operational pictures (DOPs), traffic factors and model input bundles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{
    Recording, Role, TrajectoryError, TrajectoryWindow, VehicleId, HISTORY_WINDOW_S,
};

pub const DOP_ROWS: usize = 8;
pub const DOP_COLS: usize = 7;
pub const DOP_LEN: usize = DOP_ROWS * DOP_COLS;
pub const SURROUND_CHANNELS: usize = 7;
pub const FACTOR_COUNT: usize = 10;
/// Flattened bundle width: 7 surrounding DOPs, the ego DOP, then the factors.
pub const BUNDLE_LEN: usize = (SURROUND_CHANNELS + 1) * DOP_LEN + FACTOR_COUNT;

/// Default safe time headway `t_h` in seconds.
pub const DEFAULT_SAFE_HEADWAY_S: f64 = 1.5;

pub const DOP_ROW_NAMES: [&str; DOP_ROWS] = [
    "relative_y",
    "relative_x",
    "lateral_velocity",
    "longitudinal_velocity",
    "lateral_acceleration",
    "longitudinal_acceleration",
    "space_headway",
    "time_headway",
];

pub const DOP_COL_NAMES: [&str; DOP_COLS] = ["mean", "std", "median", "p25", "p75", "min", "max"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Summary statistics of one series, in DOP column order.
///
/// Standard deviation uses the population divisor; percentiles interpolate
/// linearly between the closest ranks at position `p * (n - 1)`.
pub fn series_stats(values: &[f64]) -> [f64; DOP_COLS] {
    if values.is_empty() {
        return [0.0; DOP_COLS];
    }
    let n = values.len() as f64;
    // shifted by the first value so constant series give an exact mean
    let pivot = values[0];
    let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    };
    [
        mean,
        var.sqrt(),
        q(0.5),
        q(0.25),
        q(0.75),
        sorted[0],
        sorted[sorted.len() - 1],
    ]
}

/// An 8x7 matrix of statistics over one vehicle's recent trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dop(pub [[f64; DOP_COLS]; DOP_ROWS]);

impl Dop {
    pub const ZERO: Dop = Dop([[0.0; DOP_COLS]; DOP_ROWS]);

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|&v| v == 0.0)
    }

    /// Row-major flattening.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flatten().copied()
    }

    pub fn from_flat(values: &[f64]) -> Dop {
        let mut d = Dop::ZERO;
        for (i, v) in values.iter().take(DOP_LEN).enumerate() {
            d.0[i / DOP_COLS][i % DOP_COLS] = *v;
        }
        d
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[row][col]
    }
}

/// DOP of the vehicle whose trajectory `window` covers.
///
/// Positions are taken relative to the window's first frame; headway rows
/// keep the zeros recorded on frames without a preceding vehicle.
pub fn compute_dop(window: &TrajectoryWindow<'_>) -> Result<Dop, FeatureError> {
    let needed = crate::trajectory::frames_for(HISTORY_WINDOW_S, window.frame_rate);
    if window.len() < needed {
        return Err(TrajectoryError::WindowUnderrun {
            vehicle: window.vehicle_id,
            end_frame: window.end_frame(),
            needed,
            available: window.len(),
        }
        .into());
    }
    let first = &window.frames[0];
    let mut series: [Vec<f64>; DOP_ROWS] = Default::default();
    for s in series.iter_mut() {
        s.reserve(window.len());
    }
    for f in window.frames {
        series[0].push(f.y - first.y);
        series[1].push(f.x - first.x);
        series[2].push(f.vy);
        series[3].push(f.vx);
        series[4].push(f.ay);
        series[5].push(f.ax);
        series[6].push(f.space_headway);
        series[7].push(f.time_headway);
    }
    let mut dop = Dop::ZERO;
    for (row, values) in series.iter().enumerate() {
        dop.0[row] = series_stats(values);
    }
    Ok(dop)
}

/// The ten speed-gain, safety and tolerance variables, in fixed order:
/// `v_E-v_P, v_PL-v_P, v_PR-v_P, d_PL-d_P, d_PR-d_P, d_FL, d_FR, v_E-v_FL,
/// v_E-v_FR, d_P-v_E*t_h`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrafficFactors(pub [f64; FACTOR_COUNT]);

impl TrafficFactors {
    pub const NAMES: [&'static str; FACTOR_COUNT] = [
        "vE-vP", "vPL-vP", "vPR-vP", "dPL-dP", "dPR-dP", "dFL", "dFR", "vE-vFL", "vE-vFR",
        "dP-vE*th",
    ];

    /// Build the factor vector from per-role speeds and distances, where an
    /// absent vehicle contributes zero speed and zero distance.
    pub fn from_scene(v_ego: f64, v: &[f64; 7], d: &[f64; 7], t_h: f64) -> Self {
        let r = |role: Role| role.index();
        TrafficFactors([
            v_ego - v[r(Role::P)],
            v[r(Role::PL)] - v[r(Role::P)],
            v[r(Role::PR)] - v[r(Role::P)],
            d[r(Role::PL)] - d[r(Role::P)],
            d[r(Role::PR)] - d[r(Role::P)],
            d[r(Role::FL)],
            d[r(Role::FR)],
            v_ego - v[r(Role::FL)],
            v_ego - v[r(Role::FR)],
            d[r(Role::P)] - v_ego * t_h,
        ])
    }
}

/// Traffic factors of `ego` at `frame`; `d_i` is the unsigned longitudinal
/// distance between front-centers.
pub fn compute_factors(
    recording: &Recording,
    ego: VehicleId,
    frame: u32,
    t_h: f64,
) -> Result<TrafficFactors, FeatureError> {
    let e = recording.frame_of(ego, frame)?;
    let neighbors = recording.neighbors(ego, frame)?;
    let mut v = [0.0; 7];
    let mut d = [0.0; 7];
    for (role, id) in neighbors.iter() {
        if let Some(id) = id {
            let s = recording.frame_of(id, frame)?;
            v[role.index()] = s.vx;
            d[role.index()] = (s.x - e.x).abs();
        }
    }
    Ok(TrafficFactors::from_scene(e.vx, &v, &d, t_h))
}

/// Everything the classifier sees for one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Channels in role order P, PL, PR, FL, FR, ASL, ASR.
    pub surround: [Dop; SURROUND_CHANNELS],
    pub ego: Dop,
    pub factors: TrafficFactors,
}

impl FeatureBundle {
    pub fn zeros() -> Self {
        FeatureBundle {
            surround: [Dop::ZERO; SURROUND_CHANNELS],
            ego: Dop::ZERO,
            factors: TrafficFactors::default(),
        }
    }

    pub fn channel(&self, role: Role) -> &Dop {
        &self.surround[role.index()]
    }

    /// Channel-major DOPs (surrounding then ego), then factors.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(BUNDLE_LEN);
        for d in &self.surround {
            out.extend(d.flat());
        }
        out.extend(self.ego.flat());
        out.extend_from_slice(&self.factors.0);
        out
    }

    pub fn from_flat(values: &[f64]) -> Option<Self> {
        if values.len() != BUNDLE_LEN {
            return None;
        }
        let mut b = FeatureBundle::zeros();
        for (c, d) in b.surround.iter_mut().enumerate() {
            *d = Dop::from_flat(&values[c * DOP_LEN..(c + 1) * DOP_LEN]);
        }
        let ego_at = SURROUND_CHANNELS * DOP_LEN;
        b.ego = Dop::from_flat(&values[ego_at..ego_at + DOP_LEN]);
        b.factors
            .0
            .copy_from_slice(&values[ego_at + DOP_LEN..BUNDLE_LEN]);
        Some(b)
    }
}

/// Assemble the classifier input for `ego` deciding at `frame`.
///
/// Surrounding vehicles without a full history window contribute a zero DOP.
pub fn assemble_case(
    recording: &Recording,
    ego: VehicleId,
    frame: u32,
    t_h: f64,
) -> Result<FeatureBundle, FeatureError> {
    let track = recording
        .track(ego)
        .ok_or(TrajectoryError::NotFound { vehicle: ego, frame })?;
    let ego_window = track.window(frame, HISTORY_WINDOW_S, recording.frame_rate)?;
    let ego_dop = compute_dop(&ego_window)?;
    let neighbors = recording.neighbors(ego, frame)?;
    let mut surround = [Dop::ZERO; SURROUND_CHANNELS];
    for (role, id) in neighbors.iter() {
        let Some(id) = id else { continue };
        let Some(t) = recording.track(id) else {
            continue;
        };
        match t.window(frame, HISTORY_WINDOW_S, recording.frame_rate) {
            Ok(w) => surround[role.index()] = compute_dop(&w)?,
            Err(TrajectoryError::WindowUnderrun { .. }) | Err(TrajectoryError::NotFound { .. }) => {
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(FeatureBundle {
        surround,
        ego: ego_dop,
        factors: compute_factors(recording, ego, frame, t_h)?,
    })
}

/// Per-dimension z-scoring fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit on flattened rows. Near-constant dimensions get unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Option<Self> {
        let mut iter = rows.into_iter().peekable();
        let dim = iter.peek()?.len();
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        let mut n = 0usize;
        let mut rows_seen: Vec<&[f64]> = Vec::new();
        for r in iter {
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
            rows_seen.push(r);
            n += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for r in &rows_seen {
            for ((acc, v), m) in sum_sq.iter_mut().zip(r.iter()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = sum_sq
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-9 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Some(Normalizer { mean, std })
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::testutil::*;
    use crate::trajectory::{NeighborIds, TrackFrame};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Order statistics by selection: the k-th smallest found by counting,
    /// mean and spread by two explicit passes.
    pub(crate) fn oracle_stats(values: &[f64]) -> [f64; 7] {
        let n = values.len();
        let kth = |k: usize| -> f64 {
            for &c in values {
                let below = values.iter().filter(|&&v| v < c).count();
                let equal = values.iter().filter(|&&v| v == c).count();
                if below <= k && k < below + equal {
                    return c;
                }
            }
            unreachable!()
        };
        let pct = |p: f64| {
            let h = (n - 1) as f64 * p;
            let lo = h.floor();
            kth(lo as usize) + (h - lo) * (kth(h.ceil() as usize) - kth(lo as usize))
        };
        let mut mean = 0.0;
        for v in values {
            mean += v;
        }
        mean /= n as f64;
        let mut ss = 0.0;
        for v in values {
            ss += (v - mean).powi(2);
        }
        [
            mean,
            (ss / n as f64).sqrt(),
            pct(0.5),
            pct(0.25),
            pct(0.75),
            kth(0),
            kth(n - 1),
        ]
    }

    fn random_track(rng: &mut ChaCha8Rng, n: usize) -> Vec<TrackFrame> {
        (0..n)
            .map(|i| TrackFrame {
                frame: i as u32,
                vehicle_id: 1,
                x: rng.gen_range(-50.0..50.0),
                y: rng.gen_range(-3.0..3.0),
                vx: rng.gen_range(10.0..40.0),
                vy: rng.gen_range(-1.0..1.0),
                ax: rng.gen_range(-3.0..3.0),
                ay: rng.gen_range(-0.5..0.5),
                lane_id: 3,
                space_headway: if rng.gen_bool(0.7) { rng.gen_range(5.0..80.0) } else { 0.0 },
                time_headway: rng.gen_range(0.0..4.0),
                ttc: 0.0,
                neighbors: NeighborIds::default(),
            })
            .collect()
    }

    #[test]
    fn constant_velocity_dop() {
        let t = constant_track(1, 3, 0.0, 30.0, 0, 60, 25.0);
        let w = t.window(59, 2.0, 25.0).unwrap();
        let dop = compute_dop(&w).unwrap();
        assert_eq!(dop.0[3], [30.0, 0.0, 30.0, 30.0, 30.0, 30.0, 30.0]);
        for row in [0, 2, 4, 5, 6, 7] {
            assert_eq!(dop.0[row], [0.0; 7], "row {row}");
        }
        // relative x grows from 0 to 49 frames * 1.2 m
        assert_eq!(dop.0[1][5], 0.0);
        assert!((dop.0[1][6] - 49.0 * 1.2).abs() < 1e-9);
    }

    #[test]
    fn short_window_underruns() {
        let t = constant_track(1, 3, 0.0, 30.0, 0, 60, 25.0);
        let w = t.window(59, 1.0, 25.0).unwrap();
        assert!(matches!(
            compute_dop(&w),
            Err(FeatureError::Trajectory(TrajectoryError::WindowUnderrun { .. }))
        ));
    }

    #[test]
    fn dop_matches_brute_force_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let frames = random_track(&mut rng, 50);
            let w = TrajectoryWindow {
                vehicle_id: 1,
                frame_rate: 25.0,
                frames: &frames,
            };
            let dop = compute_dop(&w).unwrap();
            let x0 = frames[0].x;
            let y0 = frames[0].y;
            let rows: [Vec<f64>; 8] = [
                frames.iter().map(|f| f.y - y0).collect(),
                frames.iter().map(|f| f.x - x0).collect(),
                frames.iter().map(|f| f.vy).collect(),
                frames.iter().map(|f| f.vx).collect(),
                frames.iter().map(|f| f.ay).collect(),
                frames.iter().map(|f| f.ax).collect(),
                frames.iter().map(|f| f.space_headway).collect(),
                frames.iter().map(|f| f.time_headway).collect(),
            ];
            for (r, series) in rows.iter().enumerate() {
                let want = oracle_stats(series);
                for c in 0..7 {
                    assert!((dop.0[r][c] - want[c]).abs() <= 1e-9, "row {r} col {c}");
                }
            }
        }
    }

    #[test]
    fn lone_ego_factors() {
        let rec = recording_of(vec![constant_track(1, 3, 100.0, 30.0, 0, 5, 25.0)]);
        let f = compute_factors(&rec, 1, 2, 1.5).unwrap();
        assert_eq!(f.0, [30.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 30.0, 30.0, -45.0]);
    }

    #[test]
    fn preceding_and_left_preceding_factors() {
        let rec = recording_of(vec![
            constant_track(1, 3, 100.0, 30.0, 0, 1, 25.0),
            constant_track(2, 3, 140.0, 25.0, 0, 1, 25.0),
            constant_track(3, 2, 160.0, 33.0, 0, 1, 25.0),
        ]);
        let f = compute_factors(&rec, 1, 0, 1.5).unwrap();
        assert_eq!(f.0, [5.0, 8.0, -25.0, 20.0, -40.0, 0.0, 0.0, 30.0, 30.0, -5.0]);
    }

    #[test]
    fn unknown_ego_factors_not_found() {
        let rec = recording_of(vec![constant_track(1, 3, 100.0, 30.0, 0, 1, 25.0)]);
        assert!(compute_factors(&rec, 5, 0, 1.5).is_err());
    }

    #[test]
    fn lone_ego_bundle_has_zero_channels() {
        let rec = recording_of(vec![constant_track(1, 3, 100.0, 30.0, 0, 80, 25.0)]);
        let b = assemble_case(&rec, 1, 70, 1.5).unwrap();
        assert!(b.surround.iter().all(Dop::is_zero));
        assert!(!b.ego.is_zero());
        assert!(matches!(
            assemble_case(&rec, 1, 10, 1.5),
            Err(FeatureError::Trajectory(TrajectoryError::WindowUnderrun { .. }))
        ));
    }

    #[test]
    fn neighbor_without_history_is_zero_channel() {
        let rec = recording_of(vec![
            constant_track(1, 3, 100.0, 30.0, 0, 80, 25.0),
            constant_track(2, 3, 200.0, 30.0, 60, 20, 25.0),
            constant_track(3, 2, 200.0, 30.0, 0, 80, 25.0),
        ]);
        let b = assemble_case(&rec, 1, 70, 1.5).unwrap();
        assert!(b.channel(Role::P).is_zero());
        assert!(!b.channel(Role::PL).is_zero());
        // the factor still sees the young vehicle
        assert_eq!(b.factors.0[0], 0.0);
        assert!((b.factors.0[9] - (28.0 - 45.0)).abs() < 1e-9);
    }

    #[test]
    fn channel_order_independent_of_ids() {
        let layout = [(3, 140.0), (2, 160.0), (4, 125.0), (2, 60.0), (4, 80.0), (2, 98.0), (4, 102.0)];
        let build = |ids: &[u32]| {
            // positions in `layout` hold at frame 55 (2.2 s)
            let mut tracks = vec![constant_track(1, 3, 100.0 - 66.0, 30.0, 0, 60, 25.0)];
            for (i, &(lane, x)) in layout.iter().enumerate() {
                let v = 20.0 + i as f64;
                tracks.push(constant_track(ids[i], lane, x - v * 2.2, v, 0, 60, 25.0));
            }
            assemble_case(&recording_of(tracks), 1, 55, 1.5).unwrap()
        };
        let a = build(&[2, 3, 4, 5, 6, 7, 8]);
        let b = build(&[80, 12, 44, 9, 31, 70, 5]);
        assert_eq!(a, b);
        for c in &a.surround {
            assert!(!c.is_zero());
        }
        // P is lane 3 at x=140, longitudinal speed 20
        assert_eq!(a.channel(Role::P).0[3][0], 20.0);
        assert_eq!(a.channel(Role::ASR).0[3][0], 26.0);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..BUNDLE_LEN).map(|_| rng.gen()).collect();
        let b = FeatureBundle::from_flat(&v).unwrap();
        assert_eq!(b.to_flat(), v);
        assert!(FeatureBundle::from_flat(&v[1..]).is_none());
    }

    #[test]
    fn normalizer_zero_mean_unit_std() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        assert_eq!(n.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn order_statistics_monotone(values in proptest::collection::vec(-1e3f64..1e3, 1..80)) {
            let s = series_stats(&values);
            prop_assert!(s[5] <= s[3] && s[3] <= s[2] && s[2] <= s[4] && s[4] <= s[6]);
            prop_assert!(s[1] >= 0.0);
        }

        #[test]
        fn identical_frames_give_flat_rows(v in -50.0f64..50.0, hw in 0.0f64..60.0) {
            let mut frames = random_track(&mut ChaCha8Rng::seed_from_u64(1), 1);
            frames[0].vx = v;
            frames[0].space_headway = hw;
            let frames: Vec<_> = (0..50).map(|i| TrackFrame { frame: i, ..frames[0].clone() }).collect();
            let w = TrajectoryWindow { vehicle_id: 1, frame_rate: 25.0, frames: &frames };
            let dop = compute_dop(&w).unwrap();
            for row in dop.0 {
                prop_assert_eq!(row[1], 0.0);
                for c in [0, 2, 3, 4, 5, 6] {
                    prop_assert_eq!(row[c], row[0]);
                }
            }
        }

        #[test]
        fn factors_translation_invariant(shift in -1e4f64..1e4, xs in proptest::collection::vec((2i32..5, 0.0f64..300.0, 15.0f64..40.0), 0..10)) {
            let build = |dx: f64| {
                let mut tracks = vec![constant_track(1, 3, 150.0 + dx, 30.0, 0, 1, 25.0)];
                for (i, (lane, x, v)) in xs.iter().enumerate() {
                    tracks.push(constant_track(i as u32 + 2, *lane, *x + dx, *v, 0, 1, 25.0));
                }
                compute_factors(&recording_of(tracks), 1, 0, 1.5).unwrap()
            };
            let a = build(0.0);
            let b = build(shift);
            for (x, y) in a.0.iter().zip(b.0.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
