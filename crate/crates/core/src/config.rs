//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected and
//! missing keys keep their defaults; [`RunConfig::to_text`] writes every key.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ColaModel, ModelConfig};
use crate::tensor::checkpoint;
use crate::train::TrainConfig;
use crate::world::{fit_clusters, generate_dataset, ClusterModel, SceneSample, WorldConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Scenes written by `gen-data`.
    pub n_scenes: usize,
    pub data_seed: u64,
    pub cluster_iters: usize,
    pub cluster_restarts: usize,
    /// Held-out scenes for evaluation.
    pub eval_scenes: usize,
    pub eval_seed: u64,
    pub model_seed: u64,
    pub scenarios_per_kind: usize,
    pub scenario_seed: u64,
    pub replan_hz: f64,
    pub data_path: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            n_scenes: 2000,
            data_seed: 7,
            cluster_iters: 50,
            cluster_restarts: 8,
            eval_scenes: 200,
            eval_seed: 1007,
            model_seed: 0,
            scenarios_per_kind: 10,
            scenario_seed: 0,
            replan_hz: 2.0,
            data_path: "data/train.jsonl".into(),
            out_dir: "runs/default".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::config(format!("bad value `{v}` for `{key}`: {e}")))
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ ;)*) => {
        impl RunConfig {
            /// Every key in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse(key, value)?,)*
                    _ => return Err(Error::config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.to_string()),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "dt" => world.dt;
    "horizon" => model.horizon;
    "substeps" => world.substeps;
    "noise" => world.noise;
    "lane_width" => world.lane_width;
    "v_min" => world.v_min;
    "v_max" => world.v_max;
    "turn_v_min" => world.turn_v_min;
    "turn_v_max" => world.turn_v_max;
    "stop_v_min" => world.stop_v_min;
    "stop_v_max" => world.stop_v_max;
    "clutter_max" => world.clutter_max;
    "model_dim" => model.backbone.model_dim;
    "layers" => model.backbone.n_layers;
    "heads" => model.backbone.n_heads;
    "ff_dim" => model.backbone.ff_dim;
    "max_seq_len" => model.backbone.max_seq_len;
    "dropout" => model.backbone.dropout_rate;
    "max_scales" => model.backbone.max_scales;
    "max_horizon" => model.backbone.max_horizon;
    "prompt_len" => model.reasoner.prompt_len;
    "vision_len" => model.reasoner.vision_len;
    "keep" => model.reasoner.keep;
    "actions" => model.reasoner.actions;
    "candidates" => model.candidates;
    "scales" => model.scales;
    "strategy" => model.strategy;
    "focal_gamma" => model.reasoner.focal_gamma;
    "steps" => train.steps;
    "batch_size" => train.batch_size;
    "lr" => train.lr;
    "lr_floor" => train.lr_floor;
    "weight_decay" => train.weight_decay;
    "tau_start" => train.tau_start;
    "tau_end" => train.tau_end;
    "w_focal" => train.weights.focal;
    "w_regression" => train.weights.regression;
    "w_confidence" => train.weights.confidence;
    "log_every" => train.log_every;
    "train_seed" => train.seed;
    "model_seed" => model_seed;
    "n_scenes" => n_scenes;
    "data_seed" => data_seed;
    "cluster_iters" => cluster_iters;
    "cluster_restarts" => cluster_restarts;
    "eval_scenes" => eval_scenes;
    "eval_seed" => eval_seed;
    "scenarios_per_kind" => scenarios_per_kind;
    "scenario_seed" => scenario_seed;
    "replan_hz" => replan_hz;
    "data_path" => data_path;
    "out_dir" => out_dir;
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Copies values shared between sections.
    pub fn sync(&mut self) {
        self.world.horizon = self.model.horizon;
        self.world.l_v = self.model.reasoner.vision_len;
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.replan_hz > 0.0) {
            return Err(Error::config("replan_hz must be positive"));
        }
        let needed = crate::sim::HORIZONS.last().copied().unwrap_or(0.0);
        if self.world.horizon_secs() + 1e-9 < needed {
            return Err(Error::config(format!(
                "horizon covers {} s, evaluation needs {needed} s",
                self.world.horizon_secs()
            )));
        }
        Ok(())
    }

    /// `n` scenes from `data_seed`, labelled by maneuver clusters fitted on
    /// their own futures.
    pub fn labelled_dataset(&self, n: usize) -> Result<(Vec<SceneSample>, ClusterModel)> {
        let mut data = generate_dataset(n, self.data_seed, &self.world)?;
        let trajs: Vec<Vec<[f32; 2]>> = data.iter().map(|s| s.gt.clone()).collect();
        let mut clusters = fit_clusters(
            &trajs,
            self.model.reasoner.actions,
            self.cluster_iters,
            self.cluster_restarts,
            self.data_seed,
        )?;
        let families: Vec<_> = data.iter().map(|s| s.family).collect();
        clusters.name_by_majority(&families);
        clusters.relabel(&mut data);
        Ok((data, clusters))
    }

    /// The evaluation split, labelled with existing clusters.
    pub fn held_out(&self, clusters: &ClusterModel) -> Result<Vec<SceneSample>> {
        let mut held = generate_dataset(self.eval_scenes, self.eval_seed, &self.world)?;
        clusters.relabel(&mut held);
        Ok(held)
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: String,
    clusters: ClusterModel,
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the weights to `ckpt` and the config and clusters beside it.
pub fn save_model(ckpt: &Path, run: &RunConfig, clusters: &ClusterModel, model: &ColaModel) -> Result<()> {
    checkpoint::save(ckpt, &model.store)?;
    let side = Sidecar {
        config: run.to_text(),
        clusters: clusters.clone(),
    };
    let text = serde_json::to_string(&side).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    std::fs::write(sidecar_path(ckpt), text)?;
    Ok(())
}

/// Rebuilds a model saved by [`save_model`].
pub fn load_model(ckpt: &Path) -> Result<(RunConfig, ClusterModel, ColaModel)> {
    let text = std::fs::read_to_string(sidecar_path(ckpt))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    let run = RunConfig::parse(&side.config)?;
    let mut model = ColaModel::new(run.model.clone(), &side.clusters, run.model_seed)?;
    checkpoint::load_into(ckpt, &mut model.store)?;
    Ok((run, side.clusters, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::Strategy;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.strategy = Strategy::Single;
        cfg.train.lr = 3e-4;
        cfg.out_dir = "x/y".into();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_defaults_and_unknown_keys() {
        let cfg = RunConfig::parse("# hello\n\nkeep = 8  # fewer\n").unwrap();
        assert_eq!(cfg.model.reasoner.keep, 8);
        assert_eq!(cfg.model.reasoner.actions, 8);
        match RunConfig::parse("keep = 8\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("keep 8").is_err());
        assert!(RunConfig::parse("keep = many").is_err());
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        assert!(RunConfig::parse("keep = 100").is_err());
        assert!(RunConfig::parse("horizon = 4").is_err());
    }

    #[test]
    fn every_key_is_listed_once() {
        let mut keys = RunConfig::KEYS.to_vec();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), RunConfig::KEYS.len());
        let text = RunConfig::default().to_text();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }
}
