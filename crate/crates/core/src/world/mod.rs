//! Synthetic driving world: scene generation, kinematic ground truth,
//! token features, trajectory clustering and dataset files.

mod cluster;
mod dataset;
mod tokens;

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::collision::{boxes_overlap, Obb};

pub use cluster::{fit_clusters, mean_l2, ClusterModel};
pub use dataset::{class_weights, read_dataset, write_dataset};
pub use tokens::{ego_features, vision_tokens, EGO_DIM, TOKEN_DIM};

pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cruise,
    Brake,
    Accelerate,
    LeftTurn,
    RightTurn,
    LeftLc,
    RightLc,
    Stop,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Cruise,
        Family::Brake,
        Family::Accelerate,
        Family::LeftTurn,
        Family::RightTurn,
        Family::LeftLc,
        Family::RightLc,
        Family::Stop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Cruise => "cruise",
            Family::Brake => "brake",
            Family::Accelerate => "accelerate",
            Family::LeftTurn => "left_turn",
            Family::RightTurn => "right_turn",
            Family::LeftLc => "left_lc",
            Family::RightLc => "right_lc",
            Family::Stop => "stop",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario family `{s}`")))
    }
}

/// Generation parameters. Speeds in m/s, distances in m, times in s.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub dt: f64,
    pub horizon: usize,
    pub substeps: usize,
    pub l_v: usize,
    /// Bound on the positional noise added to ground truth, reached at the horizon.
    pub noise: f64,
    pub lane_width: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub turn_v_min: f64,
    pub turn_v_max: f64,
    pub stop_v_min: f64,
    pub stop_v_max: f64,
    pub clutter_max: usize,
    /// Kinematic speed ceiling used for sanity checks.
    pub speed_cap: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: 0.5,
            horizon: 8,
            substeps: 10,
            l_v: 64,
            noise: 0.2,
            lane_width: 5.0,
            v_min: 9.5,
            v_max: 10.5,
            turn_v_min: 7.0,
            turn_v_max: 9.0,
            stop_v_min: 3.0,
            stop_v_max: 10.5,
            clutter_max: 6,
            speed_cap: 25.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("v", self.v_min, self.v_max),
            ("turn_v", self.turn_v_min, self.turn_v_max),
            ("stop_v", self.stop_v_min, self.stop_v_max),
        ];
        for (name, lo, hi) in ranges {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.dt <= 0.0 || self.horizon == 0 || self.substeps == 0 {
            return Err(Error::config("dt, horizon and substeps must be positive"));
        }
        if self.l_v == 0 {
            return Err(Error::config("l_v must be positive"));
        }
        Ok(())
    }

    pub fn horizon_secs(&self) -> f64 {
        (self.horizon - 1) as f64 * self.dt
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f32,
    pub y: f32,
    pub heading: f32,
    pub speed: f32,
    pub yaw_rate: f32,
    pub accel: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Static,
}

/// Another road user in the ego frame; it moves along its heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub kind: AgentKind,
    pub x: f32,
    pub y: f32,
    pub heading: f32,
    pub speed: f32,
    pub length: f32,
    pub width: f32,
}

impl Agent {
    /// Footprint after `t` seconds at constant velocity.
    pub fn box_at(&self, t: f64) -> Obb {
        let h = self.heading as f64;
        let d = self.speed as f64 * t;
        Obb {
            cx: self.x as f64 + d * h.cos(),
            cy: self.y as f64 + d * h.sin(),
            heading: h,
            length: self.length as f64,
            width: self.width as f64,
        }
    }
}

/// Lane centerline polyline in the ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub points: Vec<[f32; 2]>,
    pub width: f32,
    pub speed_limit: f32,
    /// Lane the ego is meant to follow.
    pub route: bool,
    /// Lane the ego currently occupies.
    pub ego: bool,
}

/// One synthetic observation in the ego frame (ego at the origin facing +x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub id: u64,
    pub family: Family,
    pub ego: EgoState,
    pub agents: Vec<Agent>,
    pub lanes: Vec<Lane>,
    /// Waypoints at `t·dt` seconds for `t = 0..T`, metres.
    pub gt: Vec<[f32; 2]>,
    pub label: usize,
}

impl SceneSample {
    pub fn vision_tokens(&self, l_v: usize) -> Vec<f32> {
        vision_tokens(self, l_v)
    }

    pub fn ego_features(&self) -> [f32; EGO_DIM] {
        ego_features(&self.ego)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

/// Unicycle rollout (`x' = v cos θ`, `y' = v sin θ`, `θ' = ω`, `v' = a`)
/// sampled every `dt` for `steps` samples, integrated with `substeps` Euler
/// steps per sample. Speed is clamped at zero.
pub fn rollout(
    v0: f64,
    steps: usize,
    dt: f64,
    substeps: usize,
    accel: impl Fn(f64, f64) -> f64,
    omega: impl Fn(f64) -> f64,
) -> Vec<Pose> {
    let h = dt / substeps as f64;
    let (mut x, mut y, mut th, mut v) = (0.0, 0.0, 0.0, v0);
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        out.push(Pose {
            x,
            y,
            heading: th,
            speed: v,
        });
        for s in 0..substeps {
            let t = k as f64 * dt + s as f64 * h;
            let a = accel(t, v);
            let w = omega(t);
            x += v * th.cos() * h;
            y += v * th.sin() * h;
            th += w * h;
            v = (v + a * h).max(0.0);
        }
    }
    out
}

/// Motion profile of one family draw.
#[derive(Clone, Copy, Debug)]
struct Profile {
    v0: f64,
    kind: ProfileKind,
}

#[derive(Clone, Copy, Debug)]
enum ProfileKind {
    Constant,
    Accel(f64),
    BrakeTo { decel: f64, target: f64 },
    Stop(f64),
    Turn(f64),
    LaneChange { amp: f64, period: f64 },
}

const RAMP: f64 = 1.0;

impl Profile {
    fn accel(&self, _t: f64, v: f64) -> f64 {
        match self.kind {
            ProfileKind::Accel(a) => a,
            ProfileKind::BrakeTo { decel, target } if v > target => -decel,
            ProfileKind::Stop(a) => -a,
            _ => 0.0,
        }
    }

    fn omega(&self, t: f64) -> f64 {
        match self.kind {
            ProfileKind::Turn(w) => w * (t / RAMP).min(1.0),
            ProfileKind::LaneChange { amp, period } if t < period => amp * (2.0 * PI * t / period).sin(),
            _ => 0.0,
        }
    }

    fn roll(&self, steps: usize, cfg: &WorldConfig) -> Vec<Pose> {
        rollout(self.v0, steps, cfg.dt, cfg.substeps, |t, v| self.accel(t, v), |t| self.omega(t))
    }
}

fn draw_profile(family: Family, cfg: &WorldConfig, rng: &mut impl Rng) -> Profile {
    let v0 = rng.gen_range(cfg.v_min..=cfg.v_max);
    let kind = match family {
        Family::Cruise => ProfileKind::Constant,
        Family::Accelerate => ProfileKind::Accel(rng.gen_range(1.8..=2.6)),
        Family::Brake => ProfileKind::BrakeTo {
            decel: rng.gen_range(1.6..=2.2),
            target: v0 - rng.gen_range(4.0..=5.0),
        },
        Family::Stop => {
            return Profile {
                v0: rng.gen_range(cfg.stop_v_min..=cfg.stop_v_max),
                kind: ProfileKind::Stop(rng.gen_range(4.0..=5.5)),
            }
        }
        Family::LeftTurn | Family::RightTurn => {
            let sign = if family == Family::LeftTurn { 1.0 } else { -1.0 };
            return Profile {
                v0: rng.gen_range(cfg.turn_v_min..=cfg.turn_v_max),
                kind: ProfileKind::Turn(sign * rng.gen_range(0.35..=0.45)),
            };
        }
        Family::LeftLc | Family::RightLc => {
            let sign = if family == Family::LeftLc { 1.0 } else { -1.0 };
            let period = 2.5;
            let shift = rng.gen_range(4.6..=5.4);
            ProfileKind::LaneChange {
                amp: sign * shift * 2.0 * PI / (v0 * period * period),
                period,
            }
        }
    };
    Profile { v0, kind }
}

/// Footprints of the ego along a waypoint sequence, heading from the local
/// direction of travel.
pub fn ego_sweep(points: &[[f32; 2]]) -> Vec<Obb> {
    let mut heading = 0.0;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let next = points.get(i + 1).or_else(|| i.checked_sub(1).and_then(|j| points.get(j)));
            if let Some(q) = next {
                let (dx, dy) = if i + 1 < points.len() {
                    (q[0] - p[0], q[1] - p[1])
                } else {
                    (p[0] - q[0], p[1] - q[1])
                };
                if dx.hypot(dy) > 1e-3 {
                    heading = (dy as f64).atan2(dx as f64);
                }
            }
            Obb {
                cx: p[0] as f64,
                cy: p[1] as f64,
                heading,
                length: EGO_LENGTH,
                width: EGO_WIDTH,
            }
        })
        .collect()
}

/// Whether the ego, following `points` (sampled every `dt`), overlaps any
/// agent moving at constant velocity.
pub fn sweep_collides(points: &[[f32; 2]], agents: &[Agent], dt: f64) -> bool {
    let sweep = ego_sweep(points);
    sweep.iter().enumerate().any(|(t, ego)| {
        agents
            .iter()
            .any(|a| boxes_overlap(ego, &a.box_at(t as f64 * dt)).unwrap_or(false))
    })
}

/// Offsets a reference path laterally by `offset` metres (left positive).
fn offset_path(path: &[Pose], offset: f64) -> Vec<[f32; 2]> {
    path.iter()
        .map(|p| {
            let (s, c) = p.heading.sin_cos();
            [(p.x - offset * s) as f32, (p.y + offset * c) as f32]
        })
        .collect()
}

/// Reference path for lanes: 6 m spacing from 6 m behind to 54 m ahead.
fn lane_reference(profile: &Profile, family: Family) -> Vec<Pose> {
    let spacing = 6.0;
    let back = Pose {
        x: -spacing,
        y: 0.0,
        heading: 0.0,
        speed: 0.0,
    };
    let ahead: Vec<Pose> = match family {
        Family::LeftTurn | Family::RightTurn => {
            // Unit speed makes arclength equal to time.
            let ProfileKind::Turn(w) = profile.kind else {
                unreachable!("turn family has a turn profile")
            };
            let v0 = profile.v0;
            rollout(1.0, 10, spacing, 60, |_, _| 0.0, |s| w / v0 * (s / (RAMP * v0)).min(1.0))
        }
        _ => (0..10)
            .map(|k| Pose {
                x: k as f64 * spacing,
                y: 0.0,
                heading: 0.0,
                speed: 0.0,
            })
            .collect(),
    };
    std::iter::once(back).chain(ahead).collect()
}

fn make_lanes(reference: &[Pose], family: Family, width: f64, limit: f64) -> Vec<Lane> {
    let route_offset = match family {
        Family::LeftLc => width,
        Family::RightLc => -width,
        _ => 0.0,
    };
    [0.0, width, -width]
        .into_iter()
        .map(|off| Lane {
            points: offset_path(reference, off),
            width: width as f32,
            speed_limit: limit as f32,
            route: off == route_offset,
            ego: off == 0.0,
        })
        .collect()
}

fn vehicle(x: f64, y: f64, heading: f64, speed: f64, rng: &mut impl Rng) -> Agent {
    Agent {
        kind: AgentKind::Vehicle,
        x: x as f32,
        y: y as f32,
        heading: heading as f32,
        speed: speed as f32,
        length: rng.gen_range(4.0..=5.0),
        width: rng.gen_range(1.8..=2.1),
    }
}

fn conflict_agents(family: Family, profile: &Profile, rng: &mut impl Rng) -> Vec<Agent> {
    let half = EGO_LENGTH / 2.0;
    match (family, profile.kind) {
        (Family::Brake, ProfileKind::BrakeTo { target, .. }) => {
            let gap = rng.gen_range(15.0..=25.0);
            vec![vehicle(gap + half, rng.gen_range(-0.4..=0.4), 0.0, target, rng)]
        }
        (Family::Stop, ProfileKind::Stop(a)) => {
            let stop_dist = profile.v0 * profile.v0 / (2.0 * a);
            match rng.gen_range(0..3) {
                0 => {
                    let length = rng.gen_range(1.0..=4.0);
                    vec![Agent {
                        kind: AgentKind::Static,
                        x: (stop_dist + half + length / 2.0 + rng.gen_range(2.0..=6.0)) as f32,
                        y: rng.gen_range(-1.0..=1.0),
                        heading: rng.gen_range(-0.3..=0.3),
                        speed: 0.0,
                        length: length as f32,
                        width: rng.gen_range(1.0..=2.2),
                    }]
                }
                1 => {
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let ped = rng.gen_bool(0.3);
                    let x = stop_dist + half + rng.gen_range(4.0..=9.0);
                    let y = side * rng.gen_range(3.0..=12.0);
                    let speed = if ped {
                        rng.gen_range(1.0..=2.0)
                    } else {
                        rng.gen_range(2.0..=5.0)
                    };
                    let mut a = vehicle(x, y, -side * FRAC_PI_2, speed, rng);
                    if ped {
                        a.kind = AgentKind::Pedestrian;
                        a.length = 0.6;
                        a.width = 0.6;
                    }
                    vec![a]
                }
                _ => {
                    let speed = rng.gen_range(0.0..=5.0);
                    let x = stop_dist + half + 2.5 + rng.gen_range(3.0..=8.0) + speed * 3.5;
                    vec![vehicle(x, rng.gen_range(-0.8..=0.8), PI, speed, rng)]
                }
            }
        }
        (Family::Cruise, _) if rng.gen_bool(0.5) => {
            let x = rng.gen_range(30.0..=55.0);
            vec![vehicle(x, rng.gen_range(-0.4..=0.4), 0.0, profile.v0 + rng.gen_range(0.0..=2.0), rng)]
        }
        _ => Vec::new(),
    }
}

fn clutter(cfg: &WorldConfig, v0: f64, rng: &mut impl Rng) -> Vec<Agent> {
    let n = rng.gen_range(0..=cfg.clutter_max);
    (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => {
                // same-direction traffic in a neighbouring lane
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let y = side * cfg.lane_width + rng.gen_range(-0.5..=0.5);
                vehicle(rng.gen_range(-15.0..=50.0), y, 0.0, v0 + rng.gen_range(-3.0..=3.0), rng)
            }
            1 => {
                // oncoming traffic two lanes over
                let y = 2.0 * cfg.lane_width + rng.gen_range(-0.5..=0.5);
                vehicle(rng.gen_range(10.0..=70.0), y, PI, rng.gen_range(6.0..=12.0), rng)
            }
            _ => {
                // parked beside the road
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut a = vehicle(
                    rng.gen_range(-10.0..=60.0),
                    side * (1.5 * cfg.lane_width + rng.gen_range(1.5..=4.0)),
                    rng.gen_range(-0.2..=0.2),
                    0.0,
                    rng,
                );
                a.kind = AgentKind::Static;
                a
            }
        })
        .collect()
}

/// Generates one scene; identical `(seed, family, cfg)` gives an identical sample.
pub fn generate_scene(seed: u64, family: Family, cfg: &WorldConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = draw_profile(family, cfg, &mut rng);
    let path = profile.roll(cfg.horizon, cfg);
    let steps = cfg.horizon as f64;
    let gt: Vec<[f32; 2]> = path
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let s = t as f64 / steps;
            let nx = rng.gen_range(-cfg.noise..=cfg.noise) * s;
            let ny = rng.gen_range(-cfg.noise..=cfg.noise) * s;
            [(p.x + nx) as f32, (p.y + ny) as f32]
        })
        .collect();

    let limit = match family {
        Family::Accelerate => profile.v0 + rng.gen_range(5.0..=8.0),
        _ => profile.v0 + rng.gen_range(-0.5..=0.5),
    };
    let lanes = make_lanes(&lane_reference(&profile, family), family, cfg.lane_width, limit);

    let mut agents = conflict_agents(family, &profile, &mut rng);
    debug_assert!(!sweep_collides(&gt, &agents, cfg.dt));
    for a in clutter(cfg, profile.v0, &mut rng) {
        if !sweep_collides(&gt, &[a], cfg.dt) {
            agents.push(a);
        }
    }

    Ok(SceneSample {
        id: seed,
        family,
        ego: EgoState {
            speed: profile.v0 as f32,
            ..EgoState::default()
        },
        agents,
        lanes,
        gt,
        label: family.index(),
    })
}

/// `n` scenes with families drawn uniformly; scene `i` uses seed `seed·1_000_003 + i`.
pub fn generate_dataset(n: usize, seed: u64, cfg: &WorldConfig) -> Result<Vec<SceneSample>> {
    use rayon::prelude::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let families: Vec<Family> = (0..n).map(|_| Family::ALL[rng.gen_range(0..8)]).collect();
    families
        .into_par_iter()
        .enumerate()
        .map(|(i, f)| generate_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), f, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> WorldConfig {
        WorldConfig {
            noise: 0.0,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn cruise_without_noise_is_straight() {
        let cfg = quiet();
        let s = generate_scene(3, Family::Cruise, &cfg).unwrap();
        let v = s.ego.speed as f64;
        for (t, p) in s.gt.iter().enumerate() {
            assert!(p[1].abs() < 1e-6);
            let want = v * cfg.dt * t as f64;
            assert!((p[0] as f64 - want).abs() < 1e-4, "{t}: {} vs {want}", p[0]);
        }
    }

    #[test]
    fn stop_slows_down() {
        for seed in 0..20 {
            let s = generate_scene(seed, Family::Stop, &WorldConfig::default()).unwrap();
            let first = (s.gt[1][0] - s.gt[0][0]).hypot(s.gt[1][1] - s.gt[0][1]);
            let n = s.gt.len();
            let last = (s.gt[n - 1][0] - s.gt[n - 2][0]).hypot(s.gt[n - 1][1] - s.gt[n - 2][1]);
            assert!(last < first);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = WorldConfig::default();
        for f in Family::ALL {
            assert_eq!(generate_scene(42, f, &cfg).unwrap(), generate_scene(42, f, &cfg).unwrap());
        }
    }

    #[test]
    fn unknown_family_is_config_error() {
        assert!(matches!("reverse".parse::<Family>(), Err(Error::Config(_))));
        assert_eq!("left_lc".parse::<Family>().unwrap(), Family::LeftLc);
    }

    #[test]
    fn ground_truth_is_kinematically_sane() {
        let cfg = WorldConfig::default();
        for f in Family::ALL {
            for seed in 0..30 {
                let s = generate_scene(seed, f, &cfg).unwrap();
                assert_eq!(s.gt.len(), cfg.horizon);
                let p0 = s.gt[0][0].hypot(s.gt[0][1]) as f64;
                assert!(p0 < s.ego.speed as f64 * cfg.dt + 1e-6);
                for w in s.gt.windows(2) {
                    let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) as f64;
                    assert!(d <= cfg.speed_cap * cfg.dt);
                }
                assert!(!sweep_collides(&s.gt, &s.agents, cfg.dt), "{f} seed {seed}");
            }
        }
    }

    #[test]
    fn lane_change_ends_one_lane_over() {
        let cfg = quiet();
        let s = generate_scene(1, Family::LeftLc, &cfg).unwrap();
        let y = s.gt.last().unwrap()[1] as f64;
        assert!((4.0..6.0).contains(&y), "{y}");
        assert!(s.lanes.iter().any(|l| l.route && !l.ego));
    }

    #[test]
    fn turn_route_bends_with_the_trajectory() {
        let cfg = quiet();
        let s = generate_scene(2, Family::RightTurn, &cfg).unwrap();
        let route = s.lanes.iter().find(|l| l.route).unwrap();
        assert!(route.points.last().unwrap()[1] < -5.0);
        assert!(s.gt.last().unwrap()[1] < -1.0);
    }
}

#[cfg(test)]
mod separability {
    use super::*;

    #[test]
    fn clusters_recover_families() {
        let cfg = WorldConfig::default();
        let data = generate_dataset(2000, 7, &cfg).unwrap();
        let trajs: Vec<_> = data.iter().map(|s| s.gt.clone()).collect();
        let fams: Vec<_> = data.iter().map(|s| s.family).collect();
        let mut m = fit_clusters(&trajs, 8, 100, 8, 7).unwrap();
        m.name_by_majority(&fams);
        let agree = m.agreement(&fams);
        eprintln!("agreement {agree} names {:?}", m.names);
        assert!(agree >= 0.95, "{agree}");
    }
}
