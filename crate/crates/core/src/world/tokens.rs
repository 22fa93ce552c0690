//! Structured per-object features standing in for perception tokens.
//!
//! Layout of a token row (all values roughly unit scale):
//!
//! | col | agent                | lane                        |
//! |-----|----------------------|-----------------------------|
//! | 0   | 1                    | 0                           |
//! | 1   | 0                    | 1                           |
//! | 2   | x / 20               | far end x / 40              |
//! | 3   | y / 10               | far end y / 20              |
//! | 4   | cos heading          | cos heading at far end      |
//! | 5   | sin heading          | sin heading at far end      |
//! | 6   | (vx − ego v) / 10    | speed limit / 10            |
//! | 7   | vy / 10              | mean curvature · 10         |
//! | 8   | length / 5           | width / 5                   |
//! | 9   | width / 5            | route flag                  |
//! | 10  | static flag          | ego-lane flag               |
//! | 11  | pedestrian flag      | lateral offset at ego / 10  |
//! | 12  | ahead in ego lane    | midpoint y / 10             |
//!
//! Padding rows are all zero.

use super::{AgentKind, EgoState, SceneSample};

pub const TOKEN_DIM: usize = 13;
pub const EGO_DIM: usize = 6;

fn agent_row(a: &super::Agent, ego_speed: f32, half_lane: f32) -> [f32; TOKEN_DIM] {
    let (s, c) = a.heading.sin_cos();
    [
        1.0,
        0.0,
        a.x / 20.0,
        a.y / 10.0,
        c,
        s,
        (a.speed * c - ego_speed) / 10.0,
        a.speed * s / 10.0,
        a.length / 5.0,
        a.width / 5.0,
        f32::from(a.kind == AgentKind::Static),
        f32::from(a.kind == AgentKind::Pedestrian),
        f32::from(a.x > 0.0 && a.y.abs() < half_lane),
    ]
}

fn lane_row(lane: &super::Lane) -> [f32; TOKEN_DIM] {
    let pts = &lane.points;
    let n = pts.len();
    if n < 2 {
        return [0.0; TOKEN_DIM];
    }
    let heading = |a: [f32; 2], b: [f32; 2]| (b[1] - a[1]).atan2(b[0] - a[0]);
    let (h0, h1) = (heading(pts[0], pts[1]), heading(pts[n - 2], pts[n - 1]));
    let length: f32 = pts.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum();
    let mut turn = h1 - h0;
    while turn > std::f32::consts::PI {
        turn -= 2.0 * std::f32::consts::PI;
    }
    while turn < -std::f32::consts::PI {
        turn += 2.0 * std::f32::consts::PI;
    }
    let near = pts.iter().min_by(|a, b| a[0].hypot(a[1]).total_cmp(&b[0].hypot(b[1]))).expect("non-empty");
    let (last, mid) = (pts[n - 1], pts[n / 2]);
    [
        0.0,
        1.0,
        last[0] / 40.0,
        last[1] / 20.0,
        h1.cos(),
        h1.sin(),
        lane.speed_limit / 10.0,
        turn / length.max(1e-3) * 10.0,
        lane.width / 5.0,
        f32::from(lane.route),
        f32::from(lane.ego),
        near[1] / 10.0,
        mid[1] / 10.0,
    ]
}

/// `l_v × TOKEN_DIM` row-major features: agents nearest first, then one row
/// per lane, zero-padded or truncated to `l_v` rows.
pub fn vision_tokens(scene: &SceneSample, l_v: usize) -> Vec<f32> {
    let mut agents: Vec<_> = scene.agents.iter().collect();
    agents.sort_by(|a, b| a.x.hypot(a.y).total_cmp(&b.x.hypot(b.y)));
    let half_lane = scene.lanes.iter().find(|l| l.ego).map_or(1.75, |l| l.width / 2.0);
    let mut rows: Vec<[f32; TOKEN_DIM]> = agents
        .into_iter()
        .map(|a| agent_row(a, scene.ego.speed, half_lane))
        .collect();
    rows.extend(scene.lanes.iter().map(lane_row));
    rows.resize(l_v, [0.0; TOKEN_DIM]);
    rows.into_iter().flatten().collect()
}

/// Speed, yaw rate, curvature and heading of the ego, plus a constant.
pub fn ego_features(ego: &EgoState) -> [f32; EGO_DIM] {
    let curvature = if ego.speed > 0.5 {
        ego.yaw_rate / ego.speed
    } else {
        0.0
    };
    let (s, c) = ego.heading.sin_cos();
    [ego.speed / 10.0, ego.yaw_rate, curvature * 10.0, c, s, 1.0]
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, Family, WorldConfig};
    use super::*;

    #[test]
    fn tokens_have_fixed_size_and_zero_padding() {
        let s = generate_scene(0, Family::Brake, &WorldConfig::default()).unwrap();
        let t = vision_tokens(&s, 64);
        assert_eq!(t.len(), 64 * TOKEN_DIM);
        let used = s.agents.len() + s.lanes.len();
        assert!(used < 64);
        assert!(t[used * TOKEN_DIM..].iter().all(|&x| x == 0.0));
        assert_eq!(t[0], 1.0);
    }

    #[test]
    fn one_row_per_lane_with_its_bend() {
        let cfg = WorldConfig::default();
        for (family, sign) in [(Family::LeftTurn, 1.0), (Family::RightTurn, -1.0)] {
            let s = generate_scene(4, family, &cfg).unwrap();
            let t = vision_tokens(&s, 64);
            let rows: Vec<&[f32]> = t.chunks(TOKEN_DIM).filter(|r| r[1] == 1.0).collect();
            assert_eq!(rows.len(), s.lanes.len());
            let ego = rows.iter().find(|r| r[10] == 1.0).unwrap();
            assert!(sign * ego[5] > 0.1, "far-end heading {}", ego[5]);
            assert!(sign * ego[7] > 0.0);
            assert!(ego[11].abs() < 0.1);
        }
        let s = generate_scene(4, Family::LeftLc, &cfg).unwrap();
        let t = vision_tokens(&s, 64);
        let route = t.chunks(TOKEN_DIM).find(|r| r[1] == 1.0 && r[9] == 1.0).unwrap();
        assert!(route[11] > 0.2);
    }

    #[test]
    fn truncation_keeps_nearest_agents() {
        let s = generate_scene(0, Family::Stop, &WorldConfig::default()).unwrap();
        let t = vision_tokens(&s, 1);
        assert_eq!(t.len(), TOKEN_DIM);
        let nearest = s
            .agents
            .iter()
            .map(|a| a.x.hypot(a.y))
            .fold(f32::INFINITY, f32::min);
        assert!((t[2] * 20.0).hypot(t[3] * 10.0) - nearest < 1e-4);
    }
}
