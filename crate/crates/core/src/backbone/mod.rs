//! The shared transformer used by both reasoning passes and the planner.

mod layers;
mod mask;

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub use layers::{film_apply, repeat_rows, Attention, Block, CrossAttention, Film, Linear, Mlp, Norm};
pub use mask::AttentionMask;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// Rows in the scale embedding table.
    pub max_scales: usize,
    /// Rows in the temporal embedding table.
    pub max_horizon: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 256,
            max_seq_len: 256,
            dropout_rate: 0.0,
            max_scales: 4,
            max_horizon: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ff_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::config("backbone sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Prompt,
    Vision,
    Ego,
    Meta,
    Target,
}

impl Role {
    const COUNT: usize = 5;

    fn index(self) -> usize {
        self as usize
    }
}

/// Metadata for one sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub role: Role,
    /// Zero-based scale index, targets only.
    pub scale: Option<usize>,
    pub timestep: Option<usize>,
}

impl Slot {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            scale: None,
            timestep: None,
        }
    }

    pub fn target(scale: usize, timestep: usize) -> Self {
        Self {
            role: Role::Target,
            scale: Some(scale),
            timestep: Some(timestep),
        }
    }
}

thread_local! {
    static THREAD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Backbone passes run on the calling thread, across all instances.
pub fn thread_passes() -> u64 {
    THREAD_PASSES.with(Cell::get)
}

#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub role: ParamId,
    pub position: ParamId,
    pub scale: ParamId,
    pub temporal: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    passes: AtomicU64,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            role: self.role,
            position: self.position,
            scale: self.scale,
            temporal: self.temporal,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            passes: AtomicU64::new(0),
        }
    }
}

fn normal_table(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let std = 0.02;
        let role = store.add("backbone.role", normal_table(Role::COUNT, d, std, rng));
        let position = store.add("backbone.position", normal_table(config.max_seq_len, d, std, rng));
        let scale = store.add("backbone.scale", normal_table(config.max_scales, d, std, rng));
        let temporal = store.add("backbone.temporal", normal_table(config.max_horizon, d, std, rng));
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(store, &format!("backbone.block{l}"), d, config.n_heads, config.ff_dim, rng))
            .collect();
        let final_norm = Norm::new(store, "backbone.final_norm", d);
        Ok(Self {
            config,
            role,
            position,
            scale,
            temporal,
            blocks,
            final_norm,
            passes: AtomicU64::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.model_dim
    }

    /// Forward passes run by this instance since construction or the last reset.
    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Temporal embedding rows for the given timesteps.
    pub fn temporal_rows<T: Real>(&self, tape: &mut Tape<T>, steps: &[usize]) -> Result<Var> {
        if let Some(&t) = steps.iter().find(|&&t| t >= self.config.max_horizon) {
            return Err(Error::Layout(format!(
                "timestep {t} exceeds temporal table of {}",
                self.config.max_horizon
            )));
        }
        let table = tape.param(self.temporal);
        tape.gather_rows(table, steps)
    }

    /// Adds role, per-slot position and (for targets) scale embeddings to
    /// `content`, a `[batch·L × D]` stack of `batch` sequences laid out as `slots`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, content: Var, slots: &[Slot], batch: usize) -> Result<Var> {
        let len = slots.len();
        if len > self.config.max_seq_len {
            return Err(Error::Layout(format!(
                "sequence of {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let want = [batch * len, self.dim()];
        if tape.shape(content) != want {
            return Err(Error::shape("embed", tape.shape(content), &want));
        }
        let mut scale_idx = Vec::with_capacity(len);
        let mut is_target = Vec::with_capacity(len);
        for (i, s) in slots.iter().enumerate() {
            if s.role == Role::Target {
                let (Some(sc), Some(_)) = (s.scale, s.timestep) else {
                    return Err(Error::Layout(format!(
                        "target position {i} lacks a scale or timestep"
                    )));
                };
                if sc >= self.config.max_scales {
                    return Err(Error::Layout(format!(
                        "scale {sc} exceeds table of {}",
                        self.config.max_scales
                    )));
                }
                scale_idx.push(sc);
                is_target.push(T::one());
            } else {
                scale_idx.push(0);
                is_target.push(T::zero());
            }
        }
        let roles: Vec<usize> = slots.iter().map(|s| s.role.index()).collect();
        let positions: Vec<usize> = (0..len).collect();

        let role_t = tape.param(self.role);
        let pos_t = tape.param(self.position);
        let scale_t = tape.param(self.scale);
        let r = tape.gather_rows(role_t, &roles)?;
        let p = tape.gather_rows(pos_t, &positions)?;
        let s = tape.gather_rows(scale_t, &scale_idx)?;
        let gate = tape.constant(Tensor::new(&[len], is_target)?);
        let s = tape.scale_rows(s, gate)?;
        let bias = tape.add(r, p)?;
        let bias = tape.add(bias, s)?;
        let tiled: Vec<usize> = (0..batch * len).map(|i| i % len).collect();
        let bias = tape.gather_rows(bias, &tiled)?;
        tape.add(content, bias)
    }

    /// One pass of the block stack over `batch` sequences sharing `mask`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, batch: usize, mask: &AttentionMask) -> Result<Var> {
        self.forward_with(tape, x, batch, mask, None)
    }

    /// As [`Backbone::forward`]; dropout is applied when `rng` is given.
    pub fn forward_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        batch: usize,
        mask: &AttentionMask,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let len = mask.size();
        let want = [batch * len, self.dim()];
        if tape.shape(x) != want {
            return Err(Error::shape("backbone forward", tape.shape(x), &want));
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        THREAD_PASSES.with(|c| c.set(c.get() + 1));
        let grid = mask.grid();
        let rate = self.config.dropout_rate;
        let mut h = x;
        for block in &self.blocks {
            let r = match rng.as_mut() {
                Some(r) if rate > 0.0 => Some(&mut **r as &mut dyn RngCore),
                _ => None,
            };
            h = block.forward(tape, h, batch, len, grid.clone(), rate, r)?;
        }
        self.final_norm.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ParamStore, Backbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            model_dim: 16,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 32,
            max_seq_len: 32,
            ..BackboneConfig::default()
        };
        let bb = Backbone::new(&mut store, cfg, &mut rng).unwrap();
        (store, bb)
    }

    fn random_input(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = BackboneConfig {
            model_dim: 10,
            n_heads: 4,
            ..BackboneConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn embed_without_targets_keeps_length() {
        let (store, bb) = small();
        let slots: Vec<Slot> = [Role::Prompt; 3]
            .into_iter()
            .chain([Role::Vision; 4])
            .chain([Role::Ego])
            .map(Slot::new)
            .collect();
        let mut tape = Tape::new(&store);
        let c = tape.constant(Tensor::zeros(&[2 * 8, 16]));
        let out = bb.embed(&mut tape, c, &slots, 2).unwrap();
        assert_eq!(tape.shape(out), &[16, 16]);
        // same slot in both sequences gets the same embedding
        assert_eq!(tape.value(out).row(0), tape.value(out).row(8));
    }

    #[test]
    fn target_without_metadata_is_a_layout_error() {
        let (store, bb) = small();
        let mut tape = Tape::new(&store);
        let c = tape.constant(Tensor::zeros(&[1, 16]));
        let err = bb.embed(&mut tape, c, &[Slot::new(Role::Target)], 1).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn shared_timestep_shares_temporal_row_but_not_scale() {
        let (store, bb) = small();
        let mut tape = Tape::new(&store);
        let t = bb.temporal_rows(&mut tape, &[5, 5]).unwrap();
        assert_eq!(tape.value(t).row(0), tape.value(t).row(1));
        let c = tape.constant(Tensor::zeros(&[2, 16]));
        let out = bb
            .embed(&mut tape, c, &[Slot::target(0, 5), Slot::target(1, 5)], 1)
            .unwrap();
        let scale = store.get(bb.scale);
        let pos = store.get(bb.position);
        let diff: Vec<f32> = (0..16)
            .map(|k| tape.value(out).row(1)[k] - tape.value(out).row(0)[k])
            .collect();
        for k in 0..16 {
            let want = (scale.row(1)[k] - scale.row(0)[k]) + (pos.row(1)[k] - pos.row(0)[k]);
            assert!((diff[k] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn prefix_invariance_is_bitwise() {
        let (store, bb) = small();
        let len = 10;
        let p = 6;
        let mask = AttentionMask::from_fn(len, |i, j| j <= i.max(p - 1) && (i >= p || j < p)).unwrap();
        let x = random_input(3 * len, 16, 5);
        let full = {
            let mut tape = Tape::new(&store);
            let xv = tape.constant(x.clone());
            let out = bb.forward(&mut tape, xv, 3, &mask).unwrap();
            tape.value(out).clone()
        };
        let mut prefix_rows = Vec::new();
        for b in 0..3 {
            for i in 0..p {
                prefix_rows.extend_from_slice(x.row(b * len + i));
            }
        }
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor::new(&[3 * p, 16], prefix_rows).unwrap());
        let out = bb.forward(&mut tape, xv, 3, &mask.truncate(p).unwrap()).unwrap();
        for b in 0..3 {
            for i in 0..p {
                assert_eq!(tape.value(out).row(b * p + i), full.row(b * len + i));
            }
        }
    }

    #[test]
    fn block_diagonal_groups_are_independent() {
        let (store, bb) = small();
        let len = 8;
        let group = |i: usize| i < 3;
        let mask = AttentionMask::from_fn(len, |i, j| group(i) == group(j)).unwrap();
        let x = random_input(len, 16, 9);
        let run = |order: &[usize]| {
            let mut rows = Vec::new();
            for &i in order {
                rows.extend_from_slice(x.row(i));
            }
            let mut tape = Tape::new(&store);
            let xv = tape.constant(Tensor::new(&[len, 16], rows).unwrap());
            let out = bb.forward(&mut tape, xv, 1, &mask).unwrap();
            tape.value(out).data()[..3 * 16].to_vec()
        };
        assert_eq!(run(&[0, 1, 2, 3, 4, 5, 6, 7]), run(&[0, 1, 2, 7, 5, 3, 6, 4]));
    }

    #[test]
    fn perturbing_a_hidden_key_changes_nothing() {
        let (store, bb) = small();
        let len = 6;
        let mask = AttentionMask::from_fn(len, |i, j| j <= i).unwrap();
        let x = random_input(len, 16, 1);
        let mut y = x.clone();
        y.data_mut()[5 * 16 + 3] += 0.5;
        let run = |t: &Tensor| {
            let mut tape = Tape::new(&store);
            let xv = tape.constant(t.clone());
            let out = bb.forward(&mut tape, xv, 1, &mask).unwrap();
            tape.value(out).clone()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(a.data()[..5 * 16], b.data()[..5 * 16]);
        assert_ne!(a.row(5), b.row(5));
    }

    #[test]
    fn passes_are_counted_per_call() {
        let (store, bb) = small();
        let before = thread_passes();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(random_input(8, 16, 2));
        bb.forward(&mut tape, xv, 2, &AttentionMask::full(4)).unwrap();
        bb.forward(&mut tape, xv, 1, &AttentionMask::full(8)).unwrap();
        assert_eq!(bb.passes(), 2);
        assert_eq!(thread_passes() - before, 2);
    }

    #[test]
    fn dropout_off_is_deterministic() {
        let (store, bb) = small();
        let run = || {
            let mut tape = Tape::new(&store);
            let xv = tape.constant(random_input(5, 16, 4));
            let out = bb.forward(&mut tape, xv, 1, &AttentionMask::full(5)).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }
}
