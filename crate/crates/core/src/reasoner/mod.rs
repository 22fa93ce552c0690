//! Latent reasoner: understand, recognize, rethink and decide in two
//! backbone passes.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, Normal};

use crate::backbone::{repeat_rows, AttentionMask, Backbone, Block, CrossAttention, Film, Mlp, Norm, Role, Slot};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::world::{SceneSample, EGO_DIM, TOKEN_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct ReasonerConfig {
    /// Learned prompt tokens `L_t`.
    pub prompt_len: usize,
    /// Vision tokens `L_v`.
    pub vision_len: usize,
    /// Retained tokens `K`.
    pub keep: usize,
    /// Meta-actions `C`.
    pub actions: usize,
    pub focal_gamma: f64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            prompt_len: 8,
            vision_len: 64,
            keep: 16,
            actions: 8,
            focal_gamma: 2.0,
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vision_len == 0 {
            return Err(Error::config("vision_len must be positive"));
        }
        if self.keep == 0 || self.keep > self.vision_len {
            return Err(Error::config(format!(
                "K = {} must lie in 1..={}",
                self.keep, self.vision_len
            )));
        }
        if self.actions == 0 {
            return Err(Error::config("at least one meta-action is required"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("focal gamma must be non-negative"));
        }
        Ok(())
    }
}

/// How the router turns scores into a selection.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Deterministic top-K.
    Infer,
    /// Top-K of `scores + noise`, straight-through with a softmax at `tau`.
    /// `noise` holds one value per vision token of every scene.
    Train { noise: &'a [f64], tau: f64 },
}

/// Encoded inputs of a batch of scenes.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub batch: usize,
    /// `[batch·L_v × D]`
    pub vision: Var,
    /// `[batch × D]`
    pub ego: Var,
    /// `batch·L_v` flags for all-zero padding rows.
    pub padding: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct RouterOutput {
    /// `[batch × L_v]` router scores (before noise).
    pub scores: Var,
    /// Retained indices per scene, ascending.
    pub indices: Vec<Vec<usize>>,
    /// `[batch × L_v]` selection mask: K-hot values, relaxed gradient in training.
    pub mask: Var,
    /// `[batch·K × D]` pruned context.
    pub q_star: Var,
}

/// One reasoning cycle's results.
#[derive(Clone, Debug)]
pub struct Reasoning {
    pub encoded: Encoded,
    pub router: RouterOutput,
    /// `[batch·C × D]` refined meta tokens.
    pub meta: Var,
    /// `[batch × C]` maneuver logits.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub logits: Vec<f32>,
    /// Maneuver ids by descending logit; ties go to the lower id.
    pub ranking: Vec<usize>,
    pub top: Vec<usize>,
}

impl Decision {
    pub fn new(logits: &[f32], n: usize) -> Result<Self> {
        if n == 0 || n > logits.len() {
            return Err(Error::config(format!("N = {n} must lie in 1..={}", logits.len())));
        }
        let mut ranking: Vec<usize> = (0..logits.len()).collect();
        ranking.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        Ok(Self {
            logits: logits.to_vec(),
            top: ranking[..n].to_vec(),
            ranking,
        })
    }
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Added to the router score of padding rows so they are kept last.
pub const PADDING_SCORE: f64 = -1e4;

/// Standard Gumbel samples.
pub fn gumbel_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..n).map(|_| g.sample(rng)).collect()
}

/// Exponential decay from `start` at step 0 to `end` at `total`.
pub fn anneal_tau(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let f = (step.min(total) as f64) / total as f64;
    start * (end / start).powf(f)
}

/// `−α_y (1 − p_y)^γ log p_y` averaged over the batch, `p = softmax(logits)`.
pub fn focal_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], gamma: f64, alpha: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("focal_loss", &shape, &[labels.len(), alpha.len()]));
    }
    let c = shape[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {l} outside 0..{c}")));
    }
    if alpha.len() != c {
        return Err(Error::shape("focal_loss alpha", &[alpha.len()], &[c]));
    }
    let logp = tape.log_softmax(logits)?;
    let flat: Vec<usize> = labels.iter().enumerate().map(|(b, &l)| b * c + l).collect();
    let lp = tape.select(logp, &flat)?;
    let p = tape.exp(lp);
    let q = tape.neg(p);
    let q = tape.add_scalar(q, T::one());
    let w = tape.powf(q, T::lit(gamma));
    let a: Vec<T> = labels.iter().map(|&l| T::lit(alpha[l])).collect();
    let a = tape.constant(Tensor::new(&[labels.len()], a)?);
    let w = tape.mul(w, a)?;
    let terms = tape.mul(w, lp)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, T::lit(-1.0 / labels.len() as f64)))
}

#[derive(Clone, Debug)]
pub struct Reasoner {
    pub config: ReasonerConfig,
    /// `[L_t × D]`
    pub prompt: ParamId,
    pub vision_enc: Mlp,
    pub ego_enc: Mlp,
    pub vision_norm: Norm,
    pub ego_norm: Norm,
    pub film_route: Film,
    pub router: Mlp,
    pub film_decide: Film,
    pub cross: CrossAttention,
    pub block: Block,
    pub head: Mlp,
}

impl Reasoner {
    pub fn new(store: &mut ParamStore, config: ReasonerConfig, backbone: &Backbone, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = backbone.dim();
        let heads = backbone.config.n_heads;
        let normal = Normal::new(0.0f32, 0.02).expect("finite std");
        let prompt: Vec<f32> = (0..config.prompt_len * d).map(|_| normal.sample(rng)).collect();
        let prompt = store.add("reasoner.prompt", Tensor::new(&[config.prompt_len, d], prompt)?);
        Ok(Self {
            prompt,
            vision_enc: Mlp::new(store, "reasoner.vision_enc", (TOKEN_DIM, d, d), rng),
            ego_enc: Mlp::new(store, "reasoner.ego_enc", (EGO_DIM, d, d), rng),
            vision_norm: Norm::new(store, "reasoner.vision_norm", d),
            ego_norm: Norm::new(store, "reasoner.ego_norm", d),
            film_route: Film::new(store, "reasoner.film_route", d),
            router: Mlp::new(store, "reasoner.router", (d, d / 2, 1), rng),
            film_decide: Film::new(store, "reasoner.film_decide", d),
            cross: CrossAttention::new(store, "reasoner.cross", d, heads, rng),
            block: Block::new(store, "reasoner.block", d, heads, backbone.config.ff_dim, rng),
            head: Mlp::new(store, "reasoner.head", (d, d, 1), rng),
            config,
        })
    }

    /// Embeds vision tokens and ego features of each scene.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, scenes: &[&SceneSample]) -> Result<Encoded> {
        if scenes.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let lv = self.config.vision_len;
        let mut vision = Vec::with_capacity(scenes.len() * lv * TOKEN_DIM);
        let mut ego = Vec::with_capacity(scenes.len() * EGO_DIM);
        for s in scenes {
            vision.extend(s.vision_tokens(lv).into_iter().map(|x| T::lit(x as f64)));
            ego.extend(s.ego_features().into_iter().map(|x| T::lit(x as f64)));
        }
        let padding = vision.chunks(TOKEN_DIM).map(|r| r.iter().all(|x| *x == T::zero())).collect();
        let v = tape.constant(Tensor::new(&[scenes.len() * lv, TOKEN_DIM], vision)?);
        let e = tape.constant(Tensor::new(&[scenes.len(), EGO_DIM], ego)?);
        let v = self.vision_enc.forward(tape, v)?;
        let e = self.ego_enc.forward(tape, e)?;
        Ok(Encoded {
            batch: scenes.len(),
            vision: self.vision_norm.forward(tape, v)?,
            ego: self.ego_norm.forward(tape, e)?,
            padding,
        })
    }

    /// Lays out `[prompt; parts…]` per scene, embeds, and runs one full-mask
    /// backbone pass. Each part is `(rows per scene, stacked var, role)`.
    fn pass<T: Real>(&self, tape: &mut Tape<T>, backbone: &Backbone, batch: usize, parts: &[(usize, Var, Role)]) -> Result<(Var, usize)> {
        let lt = self.config.prompt_len;
        let mut vars = vec![tape.param(self.prompt)];
        let mut slots = vec![Slot::new(Role::Prompt); lt];
        let mut bases = vec![0usize];
        let mut next = lt;
        for &(n, v, role) in parts {
            vars.push(v);
            bases.push(next);
            next += batch * n;
            slots.extend(std::iter::repeat(Slot::new(role)).take(n));
        }
        let len = slots.len();
        let mut order = Vec::with_capacity(batch * len);
        for b in 0..batch {
            order.extend(0..lt);
            for (p, &(n, _, _)) in parts.iter().enumerate() {
                order.extend((0..n).map(|i| bases[p + 1] + b * n + i));
            }
        }
        let stacked = tape.concat_rows(&vars)?;
        let x = tape.gather_rows(stacked, &order)?;
        let x = backbone.embed(tape, x, &slots, batch)?;
        let h = backbone.forward(tape, x, batch, &AttentionMask::full(len))?;
        Ok((h, len))
    }

    /// Backbone pass 1 over `[T; V; E]`; returns the vision slice `[batch·L_v × D]`.
    pub fn understand<T: Real>(&self, tape: &mut Tape<T>, backbone: &Backbone, enc: &Encoded) -> Result<Var> {
        let lv = self.config.vision_len;
        if lv == 0 {
            return Err(Error::contract("no vision tokens"));
        }
        let (h, len) = self.pass(tape, backbone, enc.batch, &[(lv, enc.vision, Role::Vision), (1, enc.ego, Role::Ego)])?;
        let lt = self.config.prompt_len;
        let rows: Vec<usize> = (0..enc.batch).flat_map(|b| (lt..lt + lv).map(move |i| b * len + i)).collect();
        tape.gather_rows(h, &rows)
    }

    /// Ego-conditioned token routing.
    pub fn recognize<T: Real>(&self, tape: &mut Tape<T>, q_v: Var, enc: &Encoded, mode: Selection) -> Result<RouterOutput> {
        let (lv, k, batch) = (self.config.vision_len, self.config.keep, enc.batch);
        if k > lv {
            return Err(Error::config(format!("K = {k} exceeds L_v = {lv}")));
        }
        let mod_v = self.film_route.forward(tape, q_v, enc.ego, lv)?;
        let s = self.router.forward(tape, mod_v)?;
        let s = tape.reshape(s, &[batch, lv])?;
        let bias: Vec<T> = enc.padding.iter().map(|&p| if p { T::lit(PADDING_SCORE) } else { T::zero() }).collect();
        let bias = tape.constant(Tensor::new(&[batch, lv], bias)?);
        let scores = tape.add(s, bias)?;
        let (indices, mask, relaxed) = match mode {
            Selection::Infer => {
                let sv: Vec<f64> = tape.data(scores).iter().map(|x| x.as_f64()).collect();
                let indices: Vec<Vec<usize>> = sv.chunks(lv).map(|c| top_k(c, k)).collect();
                let hard = k_hot::<T>(&indices, batch, lv)?;
                (indices, tape.constant(hard), None)
            }
            Selection::Train { noise, tau } => {
                if noise.len() != batch * lv {
                    return Err(Error::shape("router noise", &[noise.len()], &[batch * lv]));
                }
                if !(tau > 0.0) {
                    return Err(Error::config("router temperature must be positive"));
                }
                let n = tape.constant(Tensor::new(&[batch, lv], noise.iter().map(|&x| T::lit(tau * x)).collect())?);
                let noisy = tape.add(scores, n)?;
                let nv: Vec<f64> = tape.data(noisy).iter().map(|x| x.as_f64()).collect();
                let indices: Vec<Vec<usize>> = nv.chunks(lv).map(|c| top_k(c, k)).collect();
                let hard = k_hot::<T>(&indices, batch, lv)?;
                let z = tape.scale(noisy, T::lit(1.0 / tau));
                let p = tape.softmax(z)?;
                let soft = tape.scale(p, T::lit(k as f64));
                (indices, tape.straight_through(hard, soft)?, Some(p))
            }
        };
        let flat: Vec<usize> = indices
            .iter()
            .enumerate()
            .flat_map(|(b, idx)| idx.iter().map(move |&i| b * lv + i))
            .collect();
        let picked = tape.gather_rows(mod_v, &flat)?;
        let gate = tape.select(mask, &flat)?;
        let mut q_star = tape.scale_rows(picked, gate)?;
        if let Some(p) = relaxed {
            // every kept row also sees the softmax mixture of all tokens,
            // zero in the forward pass, so unpicked tokens get a score gradient
            let values = tape.constant(tape.value(mod_v).clone());
            let w = tape.reshape(p, &[batch * lv])?;
            let weighted = tape.scale_rows(values, w)?;
            let mean = tape.group_mean(weighted, lv)?;
            let mix = tape.scale(mean, T::lit(lv as f64));
            let mix = repeat_rows(tape, mix, k)?;
            let zero = Tensor::zeros(tape.shape(mix));
            let st = tape.straight_through(zero, mix)?;
            q_star = tape.add(q_star, st)?;
        }
        Ok(RouterOutput {
            scores,
            indices,
            mask,
            q_star,
        })
    }

    /// Backbone pass 2 over `[T; Q*; E; M]`; returns the meta slice `[batch·C × D]`.
    pub fn rethink<T: Real>(&self, tape: &mut Tape<T>, backbone: &Backbone, q_star: Var, enc: &Encoded, meta: Var) -> Result<Var> {
        let batch = enc.batch;
        let k = tape.value(q_star).rows() / batch;
        if k == 0 {
            return Err(Error::contract("pruned context is empty"));
        }
        let c = tape.value(meta).rows();
        if c != self.config.actions {
            return Err(Error::shape("rethink meta", tape.shape(meta), &[self.config.actions, backbone.dim()]));
        }
        let tiled: Vec<usize> = (0..batch * c).map(|i| i % c).collect();
        let meta = tape.gather_rows(meta, &tiled)?;
        let (h, len) = self.pass(
            tape,
            backbone,
            batch,
            &[(k, q_star, Role::Vision), (1, enc.ego, Role::Ego), (c, meta, Role::Meta)],
        )?;
        let start = self.config.prompt_len + k + 1;
        let rows: Vec<usize> = (0..batch).flat_map(|b| (start..start + c).map(move |i| b * len + i)).collect();
        tape.gather_rows(h, &rows)
    }

    /// Maneuver logits `[batch × C]` from refined meta tokens.
    pub fn decide<T: Real>(&self, tape: &mut Tape<T>, q_m: Var, q_star: Var, ego: Var, batch: usize) -> Result<Var> {
        let c = self.config.actions;
        let k = tape.value(q_star).rows() / batch;
        let x = self.film_decide.forward(tape, q_m, ego, c)?;
        let x = self.cross.forward(tape, x, q_star, batch, c, k)?;
        let x = self.block.forward(tape, x, batch, c, None, 0.0, None)?;
        let l = self.head.forward(tape, x)?;
        tape.reshape(l, &[batch, c])
    }

    /// Full two-pass cycle.
    pub fn reason<T: Real>(
        &self,
        tape: &mut Tape<T>,
        backbone: &Backbone,
        scenes: &[&SceneSample],
        bank: Var,
        mode: Selection,
    ) -> Result<Reasoning> {
        let encoded = self.encode(tape, scenes)?;
        let q_v = self.understand(tape, backbone, &encoded)?;
        let router = self.recognize(tape, q_v, &encoded, mode)?;
        let meta = self.rethink(tape, backbone, router.q_star, &encoded, bank)?;
        let logits = self.decide(tape, meta, router.q_star, encoded.ego, encoded.batch)?;
        Ok(Reasoning {
            encoded,
            router,
            meta,
            logits,
        })
    }
}

fn k_hot<T: Real>(indices: &[Vec<usize>], batch: usize, lv: usize) -> Result<Tensor<T>> {
    let mut m = vec![T::zero(); batch * lv];
    for (b, idx) in indices.iter().enumerate() {
        for &i in idx {
            m[b * lv + i] = T::one();
        }
    }
    Tensor::new(&[batch, lv], m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::world::{generate_scene, Family, WorldConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_k_example() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5, 0.7], 2), vec![1, 3]);
        assert_eq!(top_k(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.3, 0.2, 0.1], 3), vec![0, 1, 2]);
    }

    #[test]
    fn decision_ranking() {
        let d = Decision::new(&[3.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(d.top, vec![0, 2]);
        assert_eq!(Decision::new(&[0.0; 4], 4).unwrap().ranking, vec![0, 1, 2, 3]);
        assert!(Decision::new(&[0.0; 2], 3).is_err());
    }

    #[test]
    fn focal_examples() {
        let mut tape = Tape::<f64>::detached();
        let l = tape.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let f = focal_loss(&mut tape, l, &[0], 2.0, &[1.0, 1.0]).unwrap();
        assert!((tape.scalar_value(f) - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((tape.scalar_value(f) - 0.1733).abs() < 5e-5);

        let l = tape.constant(Tensor::new(&[2, 3], vec![1.0, -0.5, 2.0, 0.2, 0.1, -1.0]).unwrap());
        let f = focal_loss(&mut tape, l, &[2, 0], 0.0, &[1.0; 3]).unwrap();
        let ce = |r: [f64; 3], y: usize| {
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            z.ln() - r[y]
        };
        let want = (ce([1.0, -0.5, 2.0], 2) + ce([0.2, 0.1, -1.0], 0)) / 2.0;
        assert!((tape.scalar_value(f) - want).abs() < 1e-12);

        let l = tape.constant(Tensor::new(&[1, 2], vec![0.0, -800.0]).unwrap());
        let f = focal_loss(&mut tape, l, &[0], 2.0, &[1.0, 1.0]).unwrap();
        assert_eq!(tape.scalar_value(f), 0.0);

        assert!(matches!(focal_loss(&mut tape, l, &[2], 2.0, &[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn tau_anneals_between_endpoints() {
        assert_eq!(anneal_tau(0, 100, 1.0, 0.1), 1.0);
        assert!((anneal_tau(100, 100, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((anneal_tau(50, 100, 1.0, 0.1) - 0.1f64.sqrt()).abs() < 1e-12);
    }

    struct Fixture {
        store: ParamStore,
        backbone: Backbone,
        reasoner: Reasoner,
        scenes: Vec<SceneSample>,
    }

    fn fixture(keep: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(
            &mut store,
            BackboneConfig {
                model_dim: 16,
                n_layers: 1,
                n_heads: 2,
                ff_dim: 32,
                max_seq_len: 128,
                ..BackboneConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let cfg = ReasonerConfig {
            prompt_len: 4,
            vision_len: 16,
            keep,
            actions: 3,
            ..ReasonerConfig::default()
        };
        let reasoner = Reasoner::new(&mut store, cfg, &backbone, &mut rng).unwrap();
        let wc = WorldConfig::default();
        let scenes = vec![
            generate_scene(1, Family::Stop, &wc).unwrap(),
            generate_scene(2, Family::LeftTurn, &wc).unwrap(),
        ];
        Fixture {
            store,
            backbone,
            reasoner,
            scenes,
        }
    }

    fn bank(tape: &mut Tape<f32>, c: usize) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        tape.constant(Tensor::new(&[c, 16], (0..c * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
    }

    #[test]
    fn padding_is_kept_last() {
        let f = fixture(8);
        let mut tape = Tape::new(&f.store);
        let refs: Vec<&SceneSample> = f.scenes.iter().collect();
        let enc = f.reasoner.encode(&mut tape, &refs).unwrap();
        let q_v = f.reasoner.understand(&mut tape, &f.backbone, &enc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: Vec<f64> = (0..32).map(|_| rng.gen_range(-50.0..50.0)).collect();
        for mode in [Selection::Infer, Selection::Train { noise: &noise, tau: 1.0 }] {
            let r = f.reasoner.recognize(&mut tape, q_v, &enc, mode).unwrap();
            for (b, idx) in r.indices.iter().enumerate() {
                let real: Vec<usize> = (0..16).filter(|&i| !enc.padding[b * 16 + i]).collect();
                assert!(!real.is_empty() && real.len() <= 8);
                assert!(real.iter().all(|i| idx.contains(i)), "{real:?} not within {idx:?}");
            }
        }
    }

    #[test]
    fn two_passes_and_shapes() {
        let f = fixture(4);
        let mut tape = Tape::new(&f.store);
        let m = bank(&mut tape, 3);
        let refs: Vec<&SceneSample> = f.scenes.iter().collect();
        let before = f.backbone.passes();
        let r = f.reasoner.reason(&mut tape, &f.backbone, &refs, m, Selection::Infer).unwrap();
        assert_eq!(f.backbone.passes() - before, 2);
        assert_eq!(tape.shape(r.router.q_star), &[8, 16]);
        assert_eq!(tape.shape(r.meta), &[6, 16]);
        assert_eq!(tape.shape(r.logits), &[2, 3]);
        for idx in &r.router.indices {
            assert_eq!(idx.len(), 4);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        let mask_sum: f32 = tape.data(r.router.mask).iter().sum();
        assert_eq!(mask_sum, 8.0);
    }

    #[test]
    fn keep_all_selects_everything() {
        let f = fixture(16);
        let mut tape = Tape::new(&f.store);
        let refs: Vec<&SceneSample> = f.scenes.iter().collect();
        let enc = f.reasoner.encode(&mut tape, &refs).unwrap();
        let q_v = f.reasoner.understand(&mut tape, &f.backbone, &enc).unwrap();
        let noise = vec![0.3; 32];
        let r = f.reasoner.recognize(&mut tape, q_v, &enc, Selection::Train { noise: &noise, tau: 0.5 }).unwrap();
        assert!(r.indices.iter().all(|i| *i == (0..16).collect::<Vec<_>>()));
    }

    #[test]
    fn zero_noise_matches_infer_and_router_gets_gradient() {
        let f = fixture(4);
        let mut tape = Tape::new(&f.store);
        let refs: Vec<&SceneSample> = f.scenes.iter().collect();
        let enc = f.reasoner.encode(&mut tape, &refs).unwrap();
        let q_v = f.reasoner.understand(&mut tape, &f.backbone, &enc).unwrap();
        let inf = f.reasoner.recognize(&mut tape, q_v, &enc, Selection::Infer).unwrap();
        let noise = vec![0.0; 32];
        let tr = f.reasoner.recognize(&mut tape, q_v, &enc, Selection::Train { noise: &noise, tau: 1.0 }).unwrap();
        assert_eq!(inf.indices, tr.indices);
        assert_eq!(tape.data(inf.q_star), tape.data(tr.q_star));

        let sq = tape.mul(tr.q_star, tr.q_star).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        let w = g.param(f.reasoner.router.fc2.w).unwrap();
        assert!(w.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn decide_ignores_q_star_order() {
        let f = fixture(4);
        let mut tape = Tape::new(&f.store);
        let refs: Vec<&SceneSample> = f.scenes.iter().collect();
        let m = bank(&mut tape, 3);
        let r = f.reasoner.reason(&mut tape, &f.backbone, &refs, m, Selection::Infer).unwrap();
        let perm = [3, 0, 2, 1, 5, 7, 4, 6];
        let shuffled = tape.gather_rows(r.router.q_star, &perm).unwrap();
        let l2 = f.reasoner.decide(&mut tape, r.meta, shuffled, r.encoded.ego, 2).unwrap();
        assert_eq!(tape.data(r.logits), tape.data(l2));
    }

    #[test]
    fn k_above_l_v_is_rejected() {
        let cfg = ReasonerConfig {
            keep: 65,
            ..ReasonerConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_and_ignores_shifts(
            scores in proptest::collection::vec(-3i32..3, 1..40),
            k in 1usize..40,
            shift in -100.0f64..100.0,
        ) {
            let k = k.min(scores.len());
            let s: Vec<f64> = scores.iter().map(|&x| x as f64 * 0.5).collect();
            let got = top_k(&s, k);
            let mut want: Vec<(f64, usize)> = s.iter().copied().zip(0..).collect();
            want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = want[..k].iter().map(|p| p.1).collect();
            want.sort_unstable();
            prop_assert_eq!(&got, &want);
            let shifted: Vec<f64> = s.iter().map(|x| x + shift.round()).collect();
            prop_assert_eq!(top_k(&shifted, k), got);
        }
    }
}
