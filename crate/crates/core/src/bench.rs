//! Latency of the parallel planning cycle against an autoregressive
//! reference that decodes one timestep per backbone pass.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{thread_passes, AttentionMask, Role, Slot};
use crate::error::{Error, Result};
use crate::model::ColaModel;
use crate::planner::WAYPOINT_SCALE;
use crate::reasoner::{Decision, Selection};
use crate::tensor::Tape;
use crate::world::SceneSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Parallel,
    Autoregressive,
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(BenchMode::Parallel),
            "autoregressive" | "ar" => Ok(BenchMode::Autoregressive),
            _ => Err(Error::config(format!("unknown bench mode `{s}`"))),
        }
    }
}

/// Reference decoder: after the two reasoning passes, each of the `T`
/// timesteps takes its own pass over the unpruned context
/// `[prompt; vision; ego]` plus the targets decoded so far, causally masked
/// and without caching. All `n` candidates share each pass as a batch.
pub fn autoregressive_cycle(model: &ColaModel, scene: &SceneSample, n: usize) -> Result<Vec<Vec<[f32; 2]>>> {
    let mut tape = Tape::new(&model.store);
    let entries = model.bank.entries(&mut tape)?;
    let r = model.reasoner.reason(&mut tape, &model.backbone, &[scene], entries, Selection::Infer)?;
    let decision = Decision::new(tape.data(r.logits), n)?;

    let cfg = &model.config.reasoner;
    let (lt, lv) = (cfg.prompt_len, cfg.vision_len);
    let ctx_len = lt + lv + 1;
    let finest = model.plan.scales() - 1;
    let horizon = model.config.horizon;

    let prompt = tape.param(model.reasoner.prompt);
    let ctx = tape.concat_rows(&[prompt, r.encoded.vision, r.encoded.ego])?;
    let actions = tape.gather_rows(entries, &decision.top)?;
    let mut out = vec![Vec::with_capacity(horizon); n];

    for t in 0..horizon {
        let len = ctx_len + t + 1;
        let steps: Vec<usize> = (0..=t).collect();
        let temporal = model.backbone.temporal_rows(&mut tape, &steps)?;
        let mut seqs = Vec::with_capacity(n);
        for c in 0..n {
            let a = tape.gather_rows(actions, &vec![c; t + 1])?;
            let targets = tape.add(a, temporal)?;
            seqs.push(tape.concat_rows(&[ctx, targets])?);
        }
        let x = tape.concat_rows(&seqs)?;
        let mut slots = vec![Slot::new(Role::Prompt); lt];
        slots.extend(std::iter::repeat(Slot::new(Role::Vision)).take(lv));
        slots.push(Slot::new(Role::Ego));
        slots.extend(steps.iter().map(|&s| Slot::target(finest, s)));
        let x = model.backbone.embed(&mut tape, x, &slots, n)?;
        let mask = AttentionMask::from_fn(len, |i, j| j < ctx_len || (i >= ctx_len && j <= i))?;
        let h = model.backbone.forward(&mut tape, x, n, &mask)?;
        let last: Vec<usize> = (0..n).map(|c| c * len + len - 1).collect();
        let h = tape.gather_rows(h, &last)?;
        let wp = model.heads.waypoint.forward(&mut tape, h)?;
        let wp = tape.value(wp);
        for (c, o) in out.iter_mut().enumerate() {
            let row = wp.row(c);
            o.push([
                (row[0] as f64 * WAYPOINT_SCALE) as f32,
                (row[1] as f64 * WAYPOINT_SCALE) as f32,
            ]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub repeats: usize,
    pub candidates: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub passes_per_cycle: u64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Times `repeats` cycles, cycling through `scenes`, after one warm-up cycle.
pub fn bench(model: &ColaModel, scenes: &[SceneSample], mode: BenchMode, n: usize, repeats: usize) -> Result<BenchReport> {
    if scenes.is_empty() || repeats == 0 {
        return Err(Error::config("bench needs at least one scene and one repeat"));
    }
    let run = |s: &SceneSample| -> Result<()> {
        match mode {
            BenchMode::Parallel => model.infer(&[s], n).map(drop),
            BenchMode::Autoregressive => autoregressive_cycle(model, s, n).map(drop),
        }
    };
    run(&scenes[0])?;
    let mut times = Vec::with_capacity(repeats);
    let mut passes = None;
    for i in 0..repeats {
        let s = &scenes[i % scenes.len()];
        let p0 = thread_passes();
        let t0 = Instant::now();
        run(s)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        let p = thread_passes() - p0;
        if *passes.get_or_insert(p) != p {
            return Err(Error::contract("pass count varied between cycles"));
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        mode,
        repeats,
        candidates: n,
        median_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        passes_per_cycle: passes.unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::{fit_clusters, generate_dataset, WorldConfig};

    #[test]
    fn pass_counts_by_mode() {
        let data = generate_dataset(16, 1, &WorldConfig::default()).unwrap();
        let trajs: Vec<_> = data.iter().map(|s| s.gt.clone()).collect();
        let clusters = fit_clusters(&trajs, 8, 10, 1, 0).unwrap();
        let mut cfg = ModelConfig::default();
        cfg.backbone.model_dim = 16;
        cfg.backbone.n_layers = 1;
        cfg.backbone.ff_dim = 32;
        let model = ColaModel::new(cfg, &clusters, 0).unwrap();
        let p = bench(&model, &data[..2], BenchMode::Parallel, 3, 2).unwrap();
        assert_eq!(p.passes_per_cycle, 3);
        let a = bench(&model, &data[..2], BenchMode::Autoregressive, 3, 2).unwrap();
        assert_eq!(a.passes_per_cycle, 2 + 8);
        let traj = autoregressive_cycle(&model, &data[0], 2).unwrap();
        assert_eq!(traj.len(), 2);
        assert!(traj.iter().all(|t| t.len() == 8));
        assert!("zigzag".parse::<BenchMode>().is_err());
    }
}
