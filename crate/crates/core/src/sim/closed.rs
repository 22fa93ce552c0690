//! Scripted safety-critical scenarios driven in closed loop.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collision::{separation, Obb};
use crate::backbone::thread_passes;
use crate::error::{Error, Result};
use crate::model::ColaModel;
use crate::world::{Agent, AgentKind, EgoState, Family, Lane, SceneSample, EGO_LENGTH, EGO_WIDTH};

pub const PHYSICS_DT: f64 = 0.05;
pub const REPLAN_HZ: f64 = 2.0;
const LANE_WIDTH: f64 = 5.0;
const MAX_BRAKE: f64 = 8.0;
const MAX_ACCEL: f64 = 3.0;
const SPEED_GAIN: f64 = 2.0;
const MAX_CURVATURE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Static,
    Frontal,
    Side,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Static, ScenarioKind::Frontal, ScenarioKind::Side];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Static => "static",
            ScenarioKind::Frontal => "frontal",
            ScenarioKind::Side => "side",
        }
    }
}

/// Adversary moving along its heading at `speed`, braking at `decel` from
/// `brake_at` seconds until it stops. Coordinates are world-frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adversary {
    pub agent: Agent,
    pub brake_at: Option<f64>,
    pub decel: f64,
}

impl Adversary {
    fn travelled(&self, t: f64) -> (f64, f64) {
        let v = self.agent.speed as f64;
        match self.brake_at {
            Some(tb) if t > tb && self.decel > 0.0 => {
                let tau = (t - tb).min(v / self.decel);
                (v * tb + v * tau - 0.5 * self.decel * tau * tau, v - self.decel * tau)
            }
            _ => (v * t, v),
        }
    }

    /// Position, heading and speed at time `t`.
    pub fn state_at(&self, t: f64) -> (f64, f64, f64, f64) {
        let (s, v) = self.travelled(t);
        let h = self.agent.heading as f64;
        (self.agent.x as f64 + s * h.cos(), self.agent.y as f64 + s * h.sin(), h, v)
    }

    pub fn box_at(&self, t: f64) -> Obb {
        let (x, y, h, _) = self.state_at(t);
        Obb {
            cx: x,
            cy: y,
            heading: h,
            length: self.agent.length as f64,
            width: self.agent.width as f64,
        }
    }
}

/// Ego starts at the origin heading +x on a straight three-lane road.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub kind: ScenarioKind,
    pub ego_speed: f64,
    pub v_ref: f64,
    pub duration: f64,
    pub adversary: Adversary,
}

fn car(x: f64, y: f64, heading: f64, speed: f64, kind: AgentKind, rng: &mut impl Rng) -> Agent {
    Agent {
        kind,
        x: x as f32,
        y: y as f32,
        heading: heading as f32,
        speed: speed as f32,
        length: rng.gen_range(4.0..=5.0),
        width: rng.gen_range(1.8..=2.1),
    }
}

/// `per_kind` scenarios of each kind; identical seeds give identical suites.
pub fn generate_scenarios(per_kind: usize, seed: u64) -> Vec<Scenario> {
    let v_ref = 10.0;
    let mut out = Vec::with_capacity(3 * per_kind);
    for (k, kind) in ScenarioKind::ALL.into_iter().enumerate() {
        for i in 0..per_kind {
            let id = (k * per_kind + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(id));
            let adversary = match kind {
                ScenarioKind::Static => Adversary {
                    agent: car(
                        rng.gen_range(25.0..=35.0),
                        rng.gen_range(-0.3..=0.3),
                        rng.gen_range(-0.2..=0.2),
                        0.0,
                        AgentKind::Static,
                        &mut rng,
                    ),
                    brake_at: None,
                    decel: 0.0,
                },
                ScenarioKind::Frontal => Adversary {
                    agent: car(
                        rng.gen_range(50.0..=60.0),
                        rng.gen_range(-0.3..=0.3),
                        PI,
                        5.0,
                        AgentKind::Vehicle,
                        &mut rng,
                    ),
                    brake_at: Some(rng.gen_range(2.5..=3.5)),
                    decel: 3.0,
                },
                ScenarioKind::Side => {
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let t_hit = rng.gen_range(3.0..=4.0);
                    let speed = rng.gen_range(4.0..=6.0);
                    let x = v_ref * t_hit + rng.gen_range(-1.0..=1.0);
                    Adversary {
                        agent: car(x, side * speed * t_hit, -side * FRAC_PI_2, speed, AgentKind::Vehicle, &mut rng),
                        brake_at: None,
                        decel: 0.0,
                    }
                }
            };
            out.push(Scenario {
                id,
                kind,
                ego_speed: v_ref,
                v_ref,
                duration: 8.0,
                adversary,
            });
        }
    }
    out
}

pub fn write_scenarios(scenarios: &[Scenario], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenarios {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Who drives the ego.
#[derive(Clone, Copy, Debug)]
pub enum Driver<'a> {
    /// Top-1 plan of the model, replanned every tick.
    Model(&'a ColaModel),
    /// Replans a straight line at the current speed.
    ConstantVelocity,
    /// Holds the initial speed and heading without planning.
    NoOp,
}

impl Driver<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Driver::Model(_) => "model",
            Driver::ConstantVelocity => "constant_velocity",
            Driver::NoOp => "no_op",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub scenario: u64,
    pub kind: ScenarioKind,
    pub collided: bool,
    pub impact_speed: f64,
    pub min_separation: f64,
    pub score: f64,
    pub trace: Vec<TraceRow>,
    /// Backbone passes of each replanning tick.
    pub passes: Vec<u64>,
    /// Diagnostic when the planner produced unusable output.
    pub failure: Option<String>,
}

/// Five when the episode is collision-free, otherwise `4·max(0, 1 − v/v_ref)`.
pub fn score(collided: bool, impact_speed: f64, v_ref: f64) -> f64 {
    if collided {
        4.0 * (1.0 - impact_speed / v_ref).max(0.0)
    } else {
        5.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Ego {
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    yaw_rate: f64,
    accel: f64,
}

impl Ego {
    fn obb(&self) -> Obb {
        Obb {
            cx: self.x,
            cy: self.y,
            heading: self.heading,
            length: EGO_LENGTH,
            width: EGO_WIDTH,
        }
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    fn to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + x * c - y * s, self.y + x * s + y * c)
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// The scene as the ego would observe it at time `t`.
fn observe(sc: &Scenario, ego: &Ego, t: f64, id: u64) -> SceneSample {
    let (ax, ay, ah, av) = sc.adversary.state_at(t);
    let (lx, ly) = ego.to_local(ax, ay);
    let mut agent = sc.adversary.agent;
    agent.x = lx as f32;
    agent.y = ly as f32;
    agent.heading = wrap(ah - ego.heading) as f32;
    agent.speed = av as f32;
    let lanes = [0.0, LANE_WIDTH, -LANE_WIDTH]
        .into_iter()
        .map(|off| {
            let points = (-1..10)
                .map(|k| {
                    let (px, py) = ego.to_local(ego.x + 6.0 * k as f64, off);
                    [px as f32, py as f32]
                })
                .collect();
            Lane {
                points,
                width: LANE_WIDTH as f32,
                speed_limit: sc.v_ref as f32,
                route: off == 0.0,
                ego: off == 0.0,
            }
        })
        .collect();
    SceneSample {
        id,
        family: Family::Cruise,
        ego: EgoState {
            speed: ego.speed as f32,
            yaw_rate: ego.yaw_rate as f32,
            accel: ego.accel as f32,
            ..EgoState::default()
        },
        agents: vec![agent],
        lanes,
        gt: Vec::new(),
        label: 0,
    }
}

/// World-frame plan with the time it was issued.
struct Plan {
    points: Vec<(f64, f64)>,
    issued: f64,
    dt: f64,
}

impl Plan {
    fn desired_speed(&self, t: f64) -> f64 {
        let n = self.points.len();
        if n < 2 {
            return 0.0;
        }
        let k = (((t - self.issued) / self.dt).floor() as usize + 1).min(n - 2);
        let (a, b) = (self.points[k], self.points[k + 1]);
        (b.0 - a.0).hypot(b.1 - a.1) / self.dt
    }

    /// Pure-pursuit curvature towards the first waypoint at least `look` ahead.
    fn curvature(&self, ego: &Ego, look: f64) -> f64 {
        let local: Vec<(f64, f64)> = self.points.iter().map(|&(x, y)| ego.to_local(x, y)).collect();
        let target = local.iter().copied().find(|&(x, y)| x > 0.0 && x.hypot(y) >= look).or_else(|| {
            let n = local.len();
            if n < 2 {
                return None;
            }
            let (a, b) = (local[n - 2], local[n - 1]);
            let seg = (b.0 - a.0).hypot(b.1 - a.1);
            if seg < 1e-3 {
                return None;
            }
            let d = b.0.hypot(b.1);
            let extra = (look - d).max(0.0);
            Some((b.0 + (b.0 - a.0) / seg * extra, b.1 + (b.1 - a.1) / seg * extra))
        });
        match target {
            Some((x, y)) if x > 0.0 => {
                let d2 = x * x + y * y;
                (2.0 * y / d2).clamp(-MAX_CURVATURE, MAX_CURVATURE)
            }
            _ => 0.0,
        }
    }
}

/// Runs one episode: replans at `replan_hz`, integrates unicycle physics
/// every [`PHYSICS_DT`] with pure-pursuit steering and proportional speed
/// control, and stops at the first overlap with the adversary.
pub fn run_episode(sc: &Scenario, driver: Driver, replan_hz: f64) -> Result<EpisodeResult> {
    if !(replan_hz > 0.0) {
        return Err(Error::config("replan rate must be positive"));
    }
    let mut ego = Ego {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        speed: sc.ego_speed,
        yaw_rate: 0.0,
        accel: 0.0,
    };
    let steps = (sc.duration / PHYSICS_DT).round() as usize;
    let every = ((1.0 / replan_hz) / PHYSICS_DT).round().max(1.0) as usize;
    let mut plan: Option<Plan> = None;
    let mut result = EpisodeResult {
        scenario: sc.id,
        kind: sc.kind,
        collided: false,
        impact_speed: 0.0,
        min_separation: f64::INFINITY,
        score: 5.0,
        trace: Vec::with_capacity(steps + 1),
        passes: Vec::new(),
        failure: None,
    };

    for step in 0..=steps {
        let t = step as f64 * PHYSICS_DT;
        result.trace.push(TraceRow {
            t,
            x: ego.x,
            y: ego.y,
            heading: ego.heading,
            speed: ego.speed,
        });
        let gap = separation(&ego.obb(), &sc.adversary.box_at(t))?;
        result.min_separation = result.min_separation.min(gap.max(0.0));
        if gap <= 0.0 {
            result.collided = true;
            result.impact_speed = ego.speed;
            break;
        }
        if step == steps {
            break;
        }

        if step % every == 0 {
            let local = match driver {
                Driver::NoOp => None,
                Driver::ConstantVelocity => {
                    Some((0..8).map(|k| [(ego.speed * 0.5 * k as f64) as f32, 0.0]).collect::<Vec<_>>())
                }
                Driver::Model(m) => {
                    let scene = observe(sc, &ego, t, sc.id);
                    let before = thread_passes();
                    let out = m.infer(&[&scene], 1);
                    result.passes.push(thread_passes() - before);
                    match out {
                        Ok(mut p) => Some(p.remove(0).plan.best_trajectory().to_vec()),
                        Err(e) => {
                            result.failure = Some(format!("planning at t = {t:.2} s: {e}"));
                            result.score = 0.0;
                            return Ok(result);
                        }
                    }
                }
            };
            plan = local.map(|pts| Plan {
                points: pts.iter().map(|p| ego.to_world(p[0] as f64, p[1] as f64)).collect(),
                issued: t,
                dt: 0.5,
            });
        }

        let (accel, yaw_rate) = match &plan {
            None => (0.0, 0.0),
            Some(p) => {
                let v_des = p.desired_speed(t);
                let a = (SPEED_GAIN * (v_des - ego.speed)).clamp(-MAX_BRAKE, MAX_ACCEL);
                let look = (0.8 * ego.speed).max(4.0);
                (a, ego.speed * p.curvature(&ego, look))
            }
        };
        ego.accel = accel;
        ego.yaw_rate = yaw_rate;
        ego.x += ego.speed * ego.heading.cos() * PHYSICS_DT;
        ego.y += ego.speed * ego.heading.sin() * PHYSICS_DT;
        ego.heading = wrap(ego.heading + yaw_rate * PHYSICS_DT);
        ego.speed = (ego.speed + accel * PHYSICS_DT).max(0.0);
    }
    result.score = score(result.collided, result.impact_speed, sc.v_ref);
    Ok(result)
}

/// Per-kind and overall averages of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopSummary {
    pub driver: String,
    pub score_avg: f64,
    pub score: Vec<(String, f64)>,
    pub collision_rate_avg: f64,
    pub collision_rate: Vec<(String, f64)>,
    pub failures: usize,
}

pub fn summarize(driver: &str, results: &[EpisodeResult]) -> ClosedLoopSummary {
    let mut score = Vec::new();
    let mut rate = Vec::new();
    for kind in ScenarioKind::ALL {
        let r: Vec<&EpisodeResult> = results.iter().filter(|r| r.kind == kind).collect();
        let n = r.len().max(1) as f64;
        score.push((kind.name().to_string(), r.iter().map(|e| e.score).sum::<f64>() / n));
        rate.push((
            kind.name().to_string(),
            100.0 * r.iter().filter(|e| e.collided).count() as f64 / n,
        ));
    }
    let n = results.len().max(1) as f64;
    ClosedLoopSummary {
        driver: driver.to_string(),
        score_avg: results.iter().map(|e| e.score).sum::<f64>() / n,
        collision_rate_avg: 100.0 * results.iter().filter(|e| e.collided).count() as f64 / n,
        score,
        collision_rate: rate,
        failures: results.iter().filter(|e| e.failure.is_some()).count(),
    }
}

/// Runs every scenario in parallel on the current rayon pool.
pub fn run_suite(scenarios: &[Scenario], driver: Driver, replan_hz: f64) -> Result<Vec<EpisodeResult>> {
    use rayon::prelude::*;
    scenarios.par_iter().map(|s| run_episode(s, driver, replan_hz)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub scenario: u64,
    pub kind: ScenarioKind,
    pub driver: String,
    pub score: f64,
    pub collided: bool,
    pub impact_speed: f64,
    pub min_separation: f64,
    pub failure: String,
}

impl EpisodeRow {
    pub fn new(driver: &str, r: &EpisodeResult) -> Self {
        Self {
            scenario: r.scenario,
            kind: r.kind,
            driver: driver.to_string(),
            score: r.score,
            collided: r.collided,
            impact_speed: r.impact_speed,
            min_separation: r.min_separation,
            failure: r.failure.clone().unwrap_or_default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_collides_without_planning() {
        for sc in generate_scenarios(10, 0) {
            let r = run_episode(&sc, Driver::NoOp, REPLAN_HZ).unwrap();
            assert!(r.collided, "scenario {} ({:?}) was not safety-critical", sc.id, sc.kind);
            let cv = run_episode(&sc, Driver::ConstantVelocity, REPLAN_HZ).unwrap();
            assert!(cv.collided);
        }
    }

    #[test]
    fn constant_velocity_into_obstacle_scores_near_zero() {
        let sc = &generate_scenarios(3, 4)[0];
        assert_eq!(sc.kind, ScenarioKind::Static);
        let r = run_episode(sc, Driver::ConstantVelocity, REPLAN_HZ).unwrap();
        assert!((r.impact_speed - sc.v_ref).abs() < 1e-9);
        assert!(r.score.abs() < 1e-9);
    }

    #[test]
    fn standing_still_avoids_a_static_obstacle() {
        let mut sc = generate_scenarios(1, 2)[0].clone();
        sc.ego_speed = 0.0;
        sc.adversary.agent.x = 20.0;
        let r = run_episode(&sc, Driver::ConstantVelocity, REPLAN_HZ).unwrap();
        assert!(!r.collided);
        assert_eq!(r.score, 5.0);
    }

    #[test]
    fn score_is_bounded_and_monotone() {
        let mut last = f64::INFINITY;
        for i in 0..=30 {
            let s = score(true, i as f64 * 0.5, 10.0);
            assert!((0.0..=5.0).contains(&s));
            assert!(s <= last);
            last = s;
        }
        assert_eq!(score(false, 3.0, 10.0), 5.0);
    }

    #[test]
    fn suites_are_deterministic_and_round_trip() {
        let a = generate_scenarios(10, 5);
        assert_eq!(a, generate_scenarios(10, 5));
        assert_eq!(a.len(), 30);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        write_scenarios(&a, &p).unwrap();
        assert_eq!(read_scenarios(&p).unwrap(), a);
    }

    #[test]
    fn braking_adversary_stops() {
        let sc = generate_scenarios(1, 0).into_iter().find(|s| s.kind == ScenarioKind::Frontal).unwrap();
        let (x1, ..) = sc.adversary.state_at(10.0);
        let (x2, _, _, v) = sc.adversary.state_at(20.0);
        assert_eq!(x1, x2);
        assert_eq!(v, 0.0);
    }
}
