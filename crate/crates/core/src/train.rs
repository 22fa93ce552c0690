//! Joint training loop and its metrics log.

use std::fs::{File, OpenOptions};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ColaModel, LossWeights};
use crate::reasoner::{anneal_tau, gumbel_noise};
use crate::tensor::optim::{AdamWConfig, CosineSchedule, OptimState};
use crate::tensor::Tape;
use crate::world::{class_weights, SceneSample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub weights: LossWeights,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 1e-3,
            lr_floor: 1e-5,
            weight_decay: 1e-4,
            tau_start: 1.0,
            tau_end: 0.1,
            weights: LossWeights::default(),
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return Err(Error::config("need 0 <= lr_floor <= lr and lr > 0"));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::config("router temperatures must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }
}

/// One row of the metrics log, averaged over a logging interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub total: f64,
    pub focal: f64,
    pub regression: f64,
    pub confidence: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Append-only CSV of [`MetricsRow`]s with a fixed header.
pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        Ok(Self {
            writer: csv::WriterBuilder::new().has_headers(true).from_writer(file),
        })
    }

    /// Opens an existing log for appending without repeating the header.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(rows)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub steps_done: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

#[derive(Default)]
struct Interval {
    n: usize,
    scenes: usize,
    total: f64,
    focal: f64,
    regression: f64,
    confidence: f64,
    correct: usize,
}

/// Trains `model` in place. On a non-finite loss or gradient the step is
/// abandoned before any parameter moves, so `model` keeps its last good
/// values, and the error is returned.
pub fn train(
    model: &mut ColaModel,
    data: &[SceneSample],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(Error::contract("training needs at least one scene"));
    }
    let c = model.config.reasoner.actions;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let alpha = class_weights(&labels, c);
    let lv = model.config.reasoner.vision_len;
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        floor: cfg.lr_floor,
        total_steps: cfg.steps,
    };
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimState::new(&model.store, adam, schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut acc = Interval::default();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let noise = gumbel_noise(batch.len() * lv, &mut rng);
        let tau = anneal_tau(step, cfg.steps, cfg.tau_start, cfg.tau_end);
        let lr = opt.current_lr();

        let (out, total, grads) = {
            let mut tape = Tape::new(&model.store);
            let out = model.loss(&mut tape, &batch, &noise, tau, &alpha, cfg.weights)?;
            let total = tape.scalar_value(out.total) as f64;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let grads = tape.backward(out.total)?;
            (out, total, grads)
        };
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store)?;
        opt.step(&mut model.store)?;

        report.first_loss.get_or_insert(total);
        report.last_loss = Some(total);
        report.steps_done = step + 1;
        acc.n += 1;
        acc.scenes += batch.len();
        acc.total += total;
        acc.focal += out.focal;
        acc.regression += out.regression;
        acc.confidence += out.confidence;
        acc.correct += out.correct;

        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let n = acc.n as f64;
            let row = MetricsRow {
                step: step + 1,
                total: acc.total / n,
                focal: acc.focal / n,
                regression: acc.regression / n,
                confidence: acc.confidence / n,
                accuracy: acc.correct as f64 / acc.scenes as f64,
                lr,
            };
            on_row(&row)?;
            report.rows.push(row);
            acc = Interval::default();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let row = |s| MetricsRow {
            step: s,
            total: 1.5,
            focal: 0.25,
            regression: 1.0,
            confidence: 0.5,
            accuracy: 0.75,
            lr: 1e-4,
        };
        MetricsLog::create(&p).unwrap().write(&row(1)).unwrap();
        MetricsLog::append(&p).unwrap().write(&row(2)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,total,focal,regression,confidence,accuracy,lr\n"));
        assert_eq!(MetricsLog::read(&p).unwrap(), vec![row(1), row(2)]);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
