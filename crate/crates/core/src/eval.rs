//! Batched open-loop evaluation of a trained model.

use crate::backbone::thread_passes;
use crate::error::{Error, Result};
use crate::model::{ColaModel, ScenePlan};
use crate::sim::{constant_velocity, open_loop, OpenLoopMetrics, HORIZONS};
use crate::world::SceneSample;

#[derive(Clone, Debug)]
pub struct OpenLoopEval {
    pub plans: Vec<ScenePlan>,
    pub metrics: OpenLoopMetrics,
    pub baseline: OpenLoopMetrics,
    /// Top-1 maneuver accuracy against the stored labels.
    pub accuracy: f64,
}

/// Plans every sample (`n` candidates, best by confidence) in batches of
/// `batch` and scores the result against the constant-velocity baseline.
pub fn evaluate_open_loop(model: &ColaModel, samples: &[SceneSample], n: usize, batch: usize, dt: f64) -> Result<OpenLoopEval> {
    if batch == 0 {
        return Err(Error::config("batch must be positive"));
    }
    let mut plans = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let before = thread_passes();
        plans.extend(model.infer(&refs, n)?);
        let used = thread_passes() - before;
        if used != 3 {
            return Err(Error::contract(format!("planning cycle used {used} backbone passes")));
        }
    }
    let preds: Vec<Vec<[f32; 2]>> = plans.iter().map(|p| p.plan.best_trajectory().to_vec()).collect();
    let metrics = open_loop(&preds, samples, dt, &HORIZONS)?;
    let cv: Vec<Vec<[f32; 2]>> = samples
        .iter()
        .map(|s| constant_velocity(s, model.config.horizon, dt))
        .collect();
    let baseline = open_loop(&cv, samples, dt, &HORIZONS)?;
    let correct = plans
        .iter()
        .zip(samples)
        .filter(|(p, s)| p.decision.ranking[0] == s.label)
        .count();
    Ok(OpenLoopEval {
        accuracy: correct as f64 / samples.len().max(1) as f64,
        plans,
        metrics,
        baseline,
    })
}
