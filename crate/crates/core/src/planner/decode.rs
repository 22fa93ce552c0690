use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{build_hybrid_mask, SequenceLayout, StagePlan};
use crate::backbone::{Backbone, Mlp, Role};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::world::mean_l2;

/// Waypoint head outputs are in units of this many metres.
pub const WAYPOINT_SCALE: f64 = 10.0;

/// Waypoint head applied per target position and confidence head applied
/// to each candidate's mean-pooled finest-scale positions.
#[derive(Clone, Debug)]
pub struct PlannerHeads {
    pub waypoint: Mlp,
    pub confidence: Mlp,
}

impl PlannerHeads {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            waypoint: Mlp::new(store, "planner.waypoint", (dim, dim, 2), rng),
            confidence: Mlp::new(store, "planner.confidence", (dim, dim / 2, 1), rng),
        }
    }
}

/// Trajectory targets for one action: `F[t] = action + temporal[t]`,
/// resampled at each scale's timesteps.
pub fn build_targets<T: Real>(
    tape: &mut Tape<T>,
    backbone: &Backbone,
    action: Var,
    plan: &StagePlan,
) -> Result<Vec<Var>> {
    plan.sets
        .iter()
        .map(|set| {
            let a = tape.gather_rows(action, &vec![0; set.len()])?;
            let t = backbone.temporal_rows(tape, set)?;
            tape.add(a, t)
        })
        .collect()
}

/// Tape handles for one batched decode.
#[derive(Clone, Debug)]
pub struct DecodeOut {
    pub layout: SequenceLayout,
    pub batch: usize,
    pub candidates: usize,
    /// `[batch·N·targets × 2]` metres, candidate-major then target order.
    pub waypoints: Var,
    /// `[batch × N]` confidence logits.
    pub confidence: Var,
}

impl PlannerHeads {
    /// Decodes every candidate of every scene in one backbone pass.
    ///
    /// `q_star` is `[batch·K × D]`; `actions` is `[C × D]`; `strategies`
    /// holds the `N` maneuver ids of each scene.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        backbone: &Backbone,
        q_star: Var,
        k: usize,
        actions: Var,
        strategies: &[Vec<usize>],
        blocks: &[Vec<usize>],
    ) -> Result<DecodeOut> {
        if k == 0 {
            return Err(Error::contract("decode needs a non-empty pruned context"));
        }
        let batch = strategies.len();
        let n = strategies.first().map_or(0, Vec::len);
        if n == 0 || strategies.iter().any(|s| s.len() != n) {
            return Err(Error::contract("every scene needs the same non-zero number of strategies"));
        }
        if tape.value(q_star).rows() != batch * k {
            return Err(Error::shape("decode q_star", tape.shape(q_star), &[batch * k, backbone.dim()]));
        }
        let layout = SequenceLayout::new(k, blocks.to_vec());
        let steps = layout.target_steps();
        let lt = steps.len();
        if lt == 0 {
            return Err(Error::Layout("decode needs at least one target".into()));
        }
        let seqs = batch * n;
        let len = layout.len();

        let flat: Vec<usize> = strategies.iter().flatten().copied().collect();
        let chosen = tape.gather_rows(actions, &flat)?;
        let rep: Vec<usize> = (0..seqs).flat_map(|q| std::iter::repeat(q).take(lt)).collect();
        let chosen = tape.gather_rows(chosen, &rep)?;
        let times: Vec<usize> = (0..seqs).flat_map(|_| steps.iter().map(|&(_, t)| t)).collect();
        let temporal = backbone.temporal_rows(tape, &times)?;
        let targets = tape.add(chosen, temporal)?;

        // Interleave context and targets per sequence.
        let mut order = Vec::with_capacity(seqs * len);
        for q in 0..seqs {
            let b = q / n;
            order.extend((0..k).map(|i| b * k + i));
            order.extend((0..lt).map(|i| batch * k + q * lt + i));
        }
        let stacked = tape.concat_rows(&[q_star, targets])?;
        let x = tape.gather_rows(stacked, &order)?;
        let x = backbone.embed(tape, x, &layout.slots(Role::Vision), seqs)?;
        let mask = build_hybrid_mask(&layout)?;
        let h = backbone.forward(tape, x, seqs, &mask)?;

        let tgt_rows: Vec<usize> = (0..seqs).flat_map(|q| (k..len).map(move |i| q * len + i)).collect();
        let ht = tape.gather_rows(h, &tgt_rows)?;
        let wp = self.waypoint.forward(tape, ht)?;
        let waypoints = tape.scale(wp, T::lit(WAYPOINT_SCALE));

        let last = layout.blocks.len() - 1;
        let off = k + layout.block_offset(last);
        let fin = layout.blocks[last].len();
        let fin_rows: Vec<usize> = (0..seqs).flat_map(|q| (off..off + fin).map(move |i| q * len + i)).collect();
        let hf = tape.gather_rows(h, &fin_rows)?;
        let pooled = tape.group_mean(hf, fin)?;
        let c = self.confidence.forward(tape, pooled)?;
        let confidence = tape.reshape(c, &[batch, n])?;

        Ok(DecodeOut {
            layout,
            batch,
            candidates: n,
            waypoints,
            confidence,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub maneuver: usize,
    pub name: String,
    pub confidence: f32,
    /// Predicted waypoints per scale, at that scale's timesteps.
    pub scales: Vec<Vec<[f32; 2]>>,
}

impl Candidate {
    pub fn finest(&self) -> &[[f32; 2]] {
        self.scales.last().map_or(&[], Vec::as_slice)
    }
}

/// Decoded candidates for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutput {
    pub candidates: Vec<Candidate>,
    /// Index of the highest-confidence candidate; ties go to the lower maneuver id.
    pub best: usize,
    pub blocks: Vec<Vec<usize>>,
}

impl PlanOutput {
    /// Reads scene `b`'s candidates out of a finished decode.
    pub fn from_decode<T: Real>(
        tape: &Tape<T>,
        out: &DecodeOut,
        b: usize,
        strategies: &[usize],
        names: &[String],
    ) -> Result<Self> {
        let wp = tape.data(out.waypoints);
        let conf = tape.data(out.confidence);
        let lt = out.layout.targets();
        let mut candidates = Vec::with_capacity(out.candidates);
        for (c, &m) in strategies.iter().enumerate() {
            let q = b * out.candidates + c;
            let mut scales = Vec::new();
            let mut row = q * lt;
            for block in &out.layout.blocks {
                let pts: Vec<[f32; 2]> = (0..block.len())
                    .map(|i| {
                        let r = row + i;
                        [wp[2 * r].as_f64() as f32, wp[2 * r + 1].as_f64() as f32]
                    })
                    .collect();
                row += block.len();
                scales.push(pts);
            }
            let confidence = conf[q].as_f64() as f32;
            if !confidence.is_finite() || scales.iter().flatten().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
                return Err(Error::NonFinite(format!("plan output for scene {b}, candidate {c}")));
            }
            candidates.push(Candidate {
                maneuver: m,
                name: names.get(m).cloned().unwrap_or_else(|| format!("maneuver{m}")),
                confidence,
                scales,
            });
        }
        let best = (0..candidates.len())
            .max_by(|&i, &j| {
                candidates[i]
                    .confidence
                    .total_cmp(&candidates[j].confidence)
                    .then(candidates[j].maneuver.cmp(&candidates[i].maneuver))
            })
            .unwrap_or(0);
        Ok(Self {
            candidates,
            best,
            blocks: out.layout.blocks.clone(),
        })
    }

    pub fn best_trajectory(&self) -> &[[f32; 2]] {
        self.candidates[self.best].finest()
    }

    pub fn to_record(&self, scene_id: u64) -> PlanRecord {
        PlanRecord {
            scene_id,
            maneuvers: self.candidates.iter().map(|c| c.name.clone()).collect(),
            confidences: self.candidates.iter().map(|c| c.confidence).collect(),
            best: self.best,
            timesteps: self.blocks.clone(),
            waypoints: self.candidates.iter().map(|c| c.scales.clone()).collect(),
            frame: "ego".into(),
        }
    }
}

/// One line of a plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub scene_id: u64,
    pub maneuvers: Vec<String>,
    pub confidences: Vec<f32>,
    pub best: usize,
    /// Timesteps of each scale.
    pub timesteps: Vec<Vec<usize>>,
    /// `[candidate][scale][point] = [x, y]` metres.
    pub waypoints: Vec<Vec<Vec<[f32; 2]>>>,
    pub frame: String,
}

#[derive(Clone, Debug)]
pub struct WtaLoss {
    pub regression: Var,
    pub confidence: Var,
    pub winners: Vec<usize>,
}

/// Winner-take-all loss. The candidate whose finest-scale prediction is
/// closest to `gt[b]` (mean L2, ties to the lower index) gets smooth-L1
/// regression at every scale; every candidate gets the confidence
/// cross-entropy against the winner. Both terms are batch means.
pub fn wta_loss<T: Real>(tape: &mut Tape<T>, out: &DecodeOut, gt: &[Vec<[f32; 2]>], horizon: usize) -> Result<WtaLoss> {
    if gt.len() != out.batch {
        return Err(Error::contract(format!("{} ground truths for {} scenes", gt.len(), out.batch)));
    }
    if let Some(g) = gt.iter().find(|g| g.len() != horizon) {
        return Err(Error::contract(format!(
            "ground truth has {} steps, expected {horizon}",
            g.len()
        )));
    }
    let n = out.candidates;
    let lt = out.layout.targets();
    let steps = out.layout.target_steps();
    let last = out.layout.blocks.len() - 1;
    let fin_off = out.layout.block_offset(last);
    let fin_steps = &out.layout.blocks[last];

    let wp = tape.data(out.waypoints);
    let mut winners = Vec::with_capacity(out.batch);
    for (b, g) in gt.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..n {
            let base = (b * n + c) * lt + fin_off;
            let pred: Vec<[f32; 2]> = (0..fin_steps.len())
                .map(|i| [wp[2 * (base + i)].as_f64() as f32, wp[2 * (base + i) + 1].as_f64() as f32])
                .collect();
            let tgt: Vec<[f32; 2]> = fin_steps.iter().map(|&t| g[t]).collect();
            let d = mean_l2(&pred, &tgt);
            if d < best.0 {
                best = (d, c);
            }
        }
        winners.push(best.1);
    }

    let rows: Vec<usize> = winners
        .iter()
        .enumerate()
        .flat_map(|(b, &w)| ((b * n + w) * lt..(b * n + w + 1) * lt).collect::<Vec<_>>())
        .collect();
    let pred = tape.gather_rows(out.waypoints, &rows)?;
    let mut target = Vec::with_capacity(rows.len() * 2);
    let mut weight = Vec::with_capacity(rows.len() * 2);
    let inv_b = 1.0 / out.batch as f64;
    for g in gt {
        for &(s, t) in &steps {
            target.extend([T::lit(g[t][0] as f64), T::lit(g[t][1] as f64)]);
            let w = T::lit(inv_b / (2 * out.layout.blocks[s].len()) as f64);
            weight.extend([w, w]);
        }
    }
    let target = tape.constant(Tensor::new(&[rows.len(), 2], target)?);
    let weight = tape.constant(Tensor::new(&[rows.len(), 2], weight)?);
    let diff = tape.sub(pred, target)?;
    let h = tape.huber(diff, T::one());
    let h = tape.mul(h, weight)?;
    let regression = tape.sum(h);

    let logp = tape.log_softmax(out.confidence)?;
    let picks: Vec<usize> = winners.iter().enumerate().map(|(b, &w)| b * n + w).collect();
    let sel = tape.select(logp, &picks)?;
    let s = tape.sum(sel);
    let confidence = tape.scale(s, T::lit(-inv_b));
    Ok(WtaLoss {
        regression,
        confidence,
        winners,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::planner::Strategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn out_with(
        tape: &mut Tape<f64>,
        wp: Vec<f64>,
        conf: Vec<f64>,
        batch: usize,
        n: usize,
        blocks: Vec<Vec<usize>>,
    ) -> DecodeOut {
        let layout = SequenceLayout::new(1, blocks);
        let lt = layout.targets();
        let waypoints = tape.leaf(Tensor::new(&[batch * n * lt, 2], wp).unwrap().with_requires_grad(true));
        let confidence = tape.leaf(Tensor::new(&[batch, n], conf).unwrap().with_requires_grad(true));
        DecodeOut {
            layout,
            batch,
            candidates: n,
            waypoints,
            confidence,
        }
    }

    #[test]
    fn single_candidate_has_no_confidence_loss() {
        let mut tape = Tape::detached();
        let gt = vec![vec![[0.0, 0.0], [1.0, 0.0]]];
        let out = out_with(&mut tape, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], vec![0.7], 1, 1, vec![vec![1], vec![0, 1]]);
        let l = wta_loss(&mut tape, &out, &gt, 2).unwrap();
        assert_eq!(tape.scalar_value(l.confidence), 0.0);
        assert_eq!(tape.scalar_value(l.regression), 0.0);
        assert_eq!(l.winners, vec![0]);
    }

    #[test]
    fn closest_candidate_wins() {
        let mut tape = Tape::detached();
        let gt = vec![vec![[0.0, 0.0]]];
        // candidate distances 1.0 and 2.0
        let out = out_with(&mut tape, vec![1.0, 0.0, 0.0, 2.0], vec![0.0, 0.0], 1, 2, vec![vec![0]]);
        let l = wta_loss(&mut tape, &out, &gt, 1).unwrap();
        assert_eq!(l.winners, vec![0]);
        let c = tape.scalar_value(l.confidence);
        assert!((c - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loser_gets_no_regression_gradient() {
        let mut tape = Tape::detached();
        let gt = vec![vec![[0.0, 0.0], [1.0, 1.0]]];
        let wp = vec![0.5, 0.5, 0.2, 0.1, 1.5, 1.2, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0];
        let out = out_with(&mut tape, wp, vec![0.3, -0.2], 1, 2, vec![vec![1], vec![0, 1]]);
        let l = wta_loss(&mut tape, &out, &gt, 2).unwrap();
        let g = tape.backward(l.regression).unwrap();
        let gw = g.wrt(out.waypoints).unwrap();
        assert!(gw[..6].iter().any(|&x| x != 0.0));
        assert!(gw[6..].iter().all(|&x| x == 0.0));
        let total = tape.add(l.regression, l.confidence).unwrap();
        let g = tape.backward(total).unwrap();
        assert!(g.wrt(out.confidence).unwrap().iter().all(|&x| x != 0.0));
    }

    #[test]
    fn wrong_horizon_is_a_contract_error() {
        let mut tape = Tape::detached();
        let out = out_with(&mut tape, vec![0.0; 2], vec![0.0], 1, 1, vec![vec![0]]);
        let gt = vec![vec![[0.0, 0.0]; 3]];
        assert!(matches!(wta_loss(&mut tape, &out, &gt, 1), Err(Error::Contract(_))));
    }

    fn tiny() -> (ParamStore, Backbone, PlannerHeads) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            model_dim: 16,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 32,
            max_seq_len: 64,
            ..BackboneConfig::default()
        };
        let bb = Backbone::new(&mut store, cfg, &mut rng).unwrap();
        let heads = PlannerHeads::new(&mut store, 16, &mut rng);
        (store, bb, heads)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn targets_follow_the_plan() {
        let (store, bb, _) = tiny();
        let plan = StagePlan::new(8, 3, Strategy::Interpolate).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.constant(random(1, 16, 1));
        let f = build_targets(&mut tape, &bb, a, &plan).unwrap();
        let sizes: Vec<usize> = f.iter().map(|&v| tape.value(v).rows()).collect();
        assert_eq!(sizes, vec![1, 2, 8]);
        // timestep 7 appears at every scale with the same content
        assert_eq!(tape.value(f[0]).row(0), tape.value(f[2]).row(7));
        assert_eq!(tape.value(f[1]).row(1), tape.value(f[2]).row(7));
    }

    #[test]
    fn decode_is_one_pass_and_prefix_consistent() {
        let (store, bb, heads) = tiny();
        let plan = StagePlan::new(8, 3, Strategy::Interpolate).unwrap();
        let k = 5;
        let strategies = vec![vec![2, 0, 1], vec![1, 2, 0]];
        let run = |blocks: &[Vec<usize>]| {
            let mut tape = Tape::new(&store);
            let q = tape.constant(random(2 * k, 16, 3));
            let acts = tape.constant(random(3, 16, 4));
            let before = bb.passes();
            let out = heads.decode(&mut tape, &bb, q, k, acts, &strategies, blocks).unwrap();
            assert_eq!(bb.passes() - before, 1);
            let plans: Vec<PlanOutput> = (0..2)
                .map(|b| PlanOutput::from_decode(&tape, &out, b, &strategies[b], &[]).unwrap())
                .collect();
            plans
        };
        let full = run(&plan.sets);
        assert_eq!(full[0].candidates.len(), 3);
        assert_eq!(full[0].candidates[0].finest().len(), 8);
        for s in 1..=3 {
            let pre = run(&plan.sets[..s]);
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(pre[b].candidates[c].scales[..], full[b].candidates[c].scales[..s]);
                }
            }
        }
    }

    #[test]
    fn single_candidate_is_best_and_record_round_trips() {
        let (store, bb, heads) = tiny();
        let plan = StagePlan::new(8, 3, Strategy::Interpolate).unwrap();
        let mut tape = Tape::new(&store);
        let q = tape.constant(random(4, 16, 3));
        let acts = tape.constant(random(2, 16, 4));
        let out = heads.decode(&mut tape, &bb, q, 4, acts, &[vec![1]], &plan.sets).unwrap();
        let p = PlanOutput::from_decode(&tape, &out, 0, &[1], &["a".into(), "b".into()]).unwrap();
        assert_eq!(p.best, 0);
        assert_eq!(p.candidates[0].name, "b");
        let rec = p.to_record(9);
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(serde_json::from_str::<PlanRecord>(&line).unwrap(), rec);
    }

    #[test]
    fn empty_context_is_rejected() {
        let (store, bb, heads) = tiny();
        let mut tape = Tape::new(&store);
        let q = tape.constant(Tensor::<f32>::zeros(&[0, 16]));
        let acts = tape.constant(random(2, 16, 4));
        let err = heads.decode(&mut tape, &bb, q, 0, acts, &[vec![0]], &[vec![0]]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
