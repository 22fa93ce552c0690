//! The assembled model: shared backbone, reasoner, meta-action bank and
//! planner, with the three-pass inference cycle and the joint training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::planner::{wta_loss, MetaActionBank, PlanOutput, PlannerHeads, StagePlan, Strategy};
use crate::reasoner::{focal_loss, Decision, Reasoner, ReasonerConfig, Selection};
use crate::tensor::{ParamStore, Real, Tape, Var};
use crate::world::{ClusterModel, SceneSample};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub reasoner: ReasonerConfig,
    /// Waypoints per trajectory `T`.
    pub horizon: usize,
    /// Scales `S`.
    pub scales: usize,
    pub strategy: Strategy,
    /// Candidates decoded in open-loop evaluation.
    pub candidates: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            reasoner: ReasonerConfig::default(),
            horizon: 8,
            scales: 3,
            strategy: Strategy::Interpolate,
            candidates: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.reasoner.validate()?;
        let plan = StagePlan::new(self.horizon, self.scales, self.strategy)?;
        if self.candidates == 0 || self.candidates > self.reasoner.actions {
            return Err(Error::config(format!(
                "N = {} must lie in 1..={}",
                self.candidates, self.reasoner.actions
            )));
        }
        if plan.scales() > self.backbone.max_scales {
            return Err(Error::config(format!(
                "{} scales exceed the scale table of {}",
                plan.scales(),
                self.backbone.max_scales
            )));
        }
        if self.horizon > self.backbone.max_horizon {
            return Err(Error::config(format!(
                "horizon {} exceeds the temporal table of {}",
                self.horizon, self.backbone.max_horizon
            )));
        }
        let r = &self.reasoner;
        let longest = (r.prompt_len + r.vision_len + 1)
            .max(r.prompt_len + r.keep + 1 + r.actions)
            .max(r.keep + plan.targets());
        if longest > self.backbone.max_seq_len {
            return Err(Error::config(format!(
                "sequences of {longest} tokens exceed max_seq_len {}",
                self.backbone.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub regression: f64,
    pub confidence: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.0,
            regression: 1.0,
            confidence: 0.5,
        }
    }
}

/// Loss graph handles and scalar summaries of one training batch.
#[derive(Clone, Debug)]
pub struct LossOut {
    pub total: Var,
    pub focal: f64,
    pub regression: f64,
    pub confidence: f64,
    /// Scenes whose top-1 maneuver equals the label.
    pub correct: usize,
}

/// Inference result for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePlan {
    pub decision: Decision,
    /// Retained vision-token indices.
    pub kept: Vec<usize>,
    /// Router scores of every vision token.
    pub scores: Vec<f32>,
    pub plan: PlanOutput,
}

#[derive(Clone, Debug)]
pub struct ColaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub reasoner: Reasoner,
    pub bank: MetaActionBank,
    pub heads: PlannerHeads,
    pub plan: StagePlan,
}

impl ColaModel {
    pub fn new(config: ModelConfig, clusters: &ClusterModel, seed: u64) -> Result<Self> {
        config.validate()?;
        if clusters.len() != config.reasoner.actions {
            return Err(Error::config(format!(
                "{} clusters for C = {}",
                clusters.len(),
                config.reasoner.actions
            )));
        }
        if clusters.centroids.iter().any(|c| c.len() != config.horizon) {
            return Err(Error::config("cluster centroids do not match the horizon"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone.clone(), &mut rng)?;
        let reasoner = Reasoner::new(&mut store, config.reasoner.clone(), &backbone, &mut rng)?;
        let bank = MetaActionBank::new(&mut store, clusters, backbone.dim(), &mut rng)?;
        let heads = PlannerHeads::new(&mut store, backbone.dim(), &mut rng);
        let plan = StagePlan::new(config.horizon, config.scales, config.strategy)?;
        Ok(Self {
            config,
            store,
            backbone,
            reasoner,
            bank,
            heads,
            plan,
        })
    }

    /// One planning cycle for a batch: two reasoning passes and one decode
    /// pass over the top-`n` maneuvers of every scene.
    pub fn infer(&self, scenes: &[&SceneSample], n: usize) -> Result<Vec<ScenePlan>> {
        self.infer_blocks(scenes, n, &self.plan.sets)
    }

    /// As [`ColaModel::infer`] with an explicit list of target blocks.
    pub fn infer_blocks(&self, scenes: &[&SceneSample], n: usize, blocks: &[Vec<usize>]) -> Result<Vec<ScenePlan>> {
        let mut tape = Tape::new(&self.store);
        let entries = self.bank.entries(&mut tape)?;
        let r = self.reasoner.reason(&mut tape, &self.backbone, scenes, entries, Selection::Infer)?;
        let c = self.config.reasoner.actions;
        let logits = tape.data(r.logits).to_vec();
        let decisions = logits
            .chunks(c)
            .map(|l| Decision::new(l, n))
            .collect::<Result<Vec<_>>>()?;
        let strategies: Vec<Vec<usize>> = decisions.iter().map(|d| d.top.clone()).collect();
        let out = self.heads.decode(
            &mut tape,
            &self.backbone,
            r.router.q_star,
            self.config.reasoner.keep,
            entries,
            &strategies,
            blocks,
        )?;
        let lv = self.config.reasoner.vision_len;
        let scores = tape.data(r.router.scores).to_vec();
        decisions
            .into_iter()
            .enumerate()
            .map(|(b, decision)| {
                let plan = PlanOutput::from_decode(&tape, &out, b, &decision.top, &self.bank.names)?;
                Ok(ScenePlan {
                    kept: r.router.indices[b].clone(),
                    scores: scores[b * lv..(b + 1) * lv].to_vec(),
                    decision,
                    plan,
                })
            })
            .collect()
    }

    /// Joint loss on a batch. Candidates are the label plus the highest
    /// scoring other maneuvers, in ascending id order.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        scenes: &[&SceneSample],
        noise: &[f64],
        tau: f64,
        alpha: &[f64],
        weights: LossWeights,
    ) -> Result<LossOut> {
        let entries = self.bank.entries(tape)?;
        let r = self.reasoner.reason(tape, &self.backbone, scenes, entries, Selection::Train { noise, tau })?;
        let c = self.config.reasoner.actions;
        let labels: Vec<usize> = scenes.iter().map(|s| s.label).collect();
        let focal = focal_loss(tape, r.logits, &labels, self.config.reasoner.focal_gamma, alpha)?;

        let logits: Vec<f64> = tape.data(r.logits).iter().map(|x| x.as_f64()).collect();
        let mut correct = 0;
        let mut strategies = Vec::with_capacity(scenes.len());
        for (b, &label) in labels.iter().enumerate() {
            let l: Vec<f32> = logits[b * c..(b + 1) * c].iter().map(|&x| x as f32).collect();
            let d = Decision::new(&l, c)?;
            if d.ranking[0] == label {
                correct += 1;
            }
            let mut cand = vec![label];
            cand.extend(d.ranking.iter().copied().filter(|&m| m != label).take(self.config.candidates - 1));
            cand.sort_unstable();
            strategies.push(cand);
        }
        let out = self.heads.decode(
            tape,
            &self.backbone,
            r.router.q_star,
            self.config.reasoner.keep,
            entries,
            &strategies,
            &self.plan.sets,
        )?;
        let gt: Vec<Vec<[f32; 2]>> = scenes.iter().map(|s| s.gt.clone()).collect();
        let wta = wta_loss(tape, &out, &gt, self.config.horizon)?;

        let f = tape.scale(focal, T::lit(weights.focal));
        let g = tape.scale(wta.regression, T::lit(weights.regression));
        let h = tape.scale(wta.confidence, T::lit(weights.confidence));
        let total = tape.add(f, g)?;
        let total = tape.add(total, h)?;
        Ok(LossOut {
            total,
            focal: tape.scalar_value(focal).as_f64(),
            regression: tape.scalar_value(wta.regression).as_f64(),
            confidence: tape.scalar_value(wta.confidence).as_f64(),
            correct,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::thread_passes;
    use crate::world::{fit_clusters, generate_dataset, WorldConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                model_dim: 16,
                n_layers: 1,
                n_heads: 2,
                ff_dim: 32,
                max_seq_len: 96,
                ..BackboneConfig::default()
            },
            reasoner: ReasonerConfig {
                prompt_len: 2,
                vision_len: 16,
                keep: 4,
                actions: 3,
                ..ReasonerConfig::default()
            },
            candidates: 2,
            ..ModelConfig::default()
        }
    }

    fn setup() -> (ColaModel, Vec<SceneSample>) {
        let mut data = generate_dataset(12, 3, &WorldConfig::default()).unwrap();
        let trajs: Vec<Vec<[f32; 2]>> = data.iter().map(|s| s.gt.clone()).collect();
        let clusters = fit_clusters(&trajs, 3, 10, 2, 1).unwrap();
        clusters.relabel(&mut data);
        let model = ColaModel::new(tiny_config(), &clusters, 4).unwrap();
        (model, data)
    }

    #[test]
    fn inference_takes_three_passes() {
        let (model, data) = setup();
        let refs: Vec<&SceneSample> = data.iter().take(4).collect();
        let before = thread_passes();
        let plans = model.infer(&refs, 2).unwrap();
        assert_eq!(thread_passes() - before, 3);
        assert_eq!(plans.len(), 4);
        for p in &plans {
            assert_eq!(p.plan.candidates.len(), 2);
            assert_eq!(p.plan.best_trajectory().len(), 8);
            assert_eq!(p.kept.len(), 4);
        }
    }

    #[test]
    fn loss_is_finite_and_has_gradients() {
        let (model, data) = setup();
        let refs: Vec<&SceneSample> = data.iter().take(3).collect();
        let noise = vec![0.0; 3 * 16];
        let mut tape = Tape::new(&model.store);
        let out = model.loss(&mut tape, &refs, &noise, 1.0, &[1.0; 3], LossWeights::default()).unwrap();
        assert!(tape.scalar_value(out.total).is_finite());
        let g = tape.backward(out.total).unwrap();
        assert!(g.param(model.reasoner.router.fc1.w).unwrap().iter().any(|&x| x != 0.0));
        assert!(g.param(model.bank.proj.w).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn mismatched_clusters_are_rejected() {
        let (_, data) = setup();
        let trajs: Vec<Vec<[f32; 2]>> = data.iter().map(|s| s.gt.clone()).collect();
        let clusters = fit_clusters(&trajs, 2, 10, 1, 1).unwrap();
        assert!(matches!(ColaModel::new(tiny_config(), &clusters, 0), Err(Error::Config(_))));
    }
}
