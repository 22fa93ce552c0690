//! Open-loop displacement and collision metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{sweep_collides, SceneSample};

/// Evaluation horizons in seconds.
pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMetrics {
    pub horizons: Vec<f64>,
    /// Metres, one per horizon.
    pub l2: Vec<f64>,
    /// Percent, one per horizon.
    pub collision: Vec<f64>,
    pub l2_avg: f64,
    pub collision_avg: f64,
    pub samples: usize,
}

/// Number of waypoints `t ≥ 1` with `t·dt ≤ h`.
fn steps_within(h: f64, dt: f64) -> usize {
    ((h / dt) + 1e-9).floor() as usize
}

/// L2 and collision rate of `preds` against each sample's ground truth and
/// agents. `preds[i][t]` is the waypoint at `t·dt`; at horizon `h` the L2 is
/// the mean distance over `0 < t·dt ≤ h` and a collision is any overlap of
/// the swept ego box with an agent up to `h`.
pub fn open_loop(preds: &[Vec<[f32; 2]>], samples: &[SceneSample], dt: f64, horizons: &[f64]) -> Result<OpenLoopMetrics> {
    if preds.len() != samples.len() {
        return Err(Error::contract(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    if horizons.is_empty() {
        return Err(Error::config("at least one horizon is required"));
    }
    let mut l2 = vec![0.0; horizons.len()];
    let mut col = vec![0.0; horizons.len()];
    for (p, s) in preds.iter().zip(samples) {
        let len = p.len().min(s.gt.len());
        for (k, &h) in horizons.iter().enumerate() {
            let n = steps_within(h, dt);
            if n == 0 || n >= len {
                return Err(Error::config(format!(
                    "horizon {h} s needs {} waypoints at dt {dt}, trajectory has {len}",
                    n + 1
                )));
            }
            let d: f64 = (1..=n)
                .map(|t| {
                    let dx = (p[t][0] - s.gt[t][0]) as f64;
                    let dy = (p[t][1] - s.gt[t][1]) as f64;
                    dx.hypot(dy)
                })
                .sum();
            l2[k] += d / n as f64;
            if sweep_collides(&p[..=n], &s.agents, dt) {
                col[k] += 1.0;
            }
        }
    }
    let m = samples.len().max(1) as f64;
    let l2: Vec<f64> = l2.into_iter().map(|x| x / m).collect();
    let collision: Vec<f64> = col.into_iter().map(|x| 100.0 * x / m).collect();
    Ok(OpenLoopMetrics {
        horizons: horizons.to_vec(),
        l2_avg: l2.iter().sum::<f64>() / l2.len() as f64,
        collision_avg: collision.iter().sum::<f64>() / collision.len() as f64,
        l2,
        collision,
        samples: samples.len(),
    })
}

/// Extrapolates the current ego speed straight ahead.
pub fn constant_velocity(sample: &SceneSample, horizon: usize, dt: f64) -> Vec<[f32; 2]> {
    let v = sample.ego.speed as f64;
    (0..horizon).map(|t| [(v * dt * t as f64) as f32, 0.0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_dataset, WorldConfig};

    fn data() -> Vec<SceneSample> {
        generate_dataset(40, 11, &WorldConfig::default()).unwrap()
    }

    #[test]
    fn ground_truth_scores_zero() {
        let d = data();
        let preds: Vec<_> = d.iter().map(|s| s.gt.clone()).collect();
        let m = open_loop(&preds, &d, 0.5, &HORIZONS).unwrap();
        assert_eq!(m.l2, vec![0.0; 3]);
        assert_eq!(m.collision, vec![0.0; 3]);
    }

    #[test]
    fn lateral_shift_scores_one_metre() {
        let d = data();
        let preds: Vec<_> = d
            .iter()
            .map(|s| s.gt.iter().map(|p| [p[0], p[1] + 1.0]).collect())
            .collect();
        let m = open_loop(&preds, &d, 0.5, &HORIZONS).unwrap();
        for v in m.l2 {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert!((m.l2_avg - 1.0).abs() < 1e-6);
    }

    #[test]
    fn averages_are_means_of_horizons() {
        let d = data();
        let preds: Vec<_> = d.iter().map(|s| constant_velocity(s, 8, 0.5)).collect();
        let m = open_loop(&preds, &d, 0.5, &HORIZONS).unwrap();
        assert!((m.l2_avg - m.l2.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((m.collision_avg - m.collision.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!(m.l2[0] <= m.l2[2]);
        assert!(m.l2_avg > 0.0);
    }

    #[test]
    fn horizon_beyond_trajectory_is_rejected() {
        let d = data();
        let preds: Vec<_> = d.iter().map(|s| s.gt.clone()).collect();
        assert!(matches!(open_loop(&preds, &d, 0.5, &[4.0]), Err(Error::Config(_))));
    }
}
