//! Central finite-difference oracle for tape gradients, run in `f64`.
//!
//! The numeric side only ever evaluates the forward graph; it shares no code
//! path with `Tape::backward`.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation for the central difference.
    pub step: f64,
    /// Denominator floor for the relative error, guarding near-zero gradients.
    pub floor: f64,
    /// Upper bound on probed elements per tensor (0 = all).
    pub max_probes: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            max_probes: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub probes: usize,
}

impl GradReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.probes += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((name.to_owned(), idx, analytic, numeric));
        }
    }
}

fn probe_indices(n: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    if max == 0 || n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

impl GradCheck {
    /// Checks gradients with respect to free input tensors.
    pub fn leaves<F>(&self, inputs: &[Tensor<f64>], f: F, rng: &mut impl Rng) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::detached();
            let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.scalar_value(out))
        };

        let mut tape = Tape::detached();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;

        let mut report = GradReport::default();
        let mut work = inputs.to_vec();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).expect("leaf requires grad").to_vec();
            for j in probe_indices(inputs[i].numel(), self.max_probes, rng) {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                report.record(&format!("input{i}"), j, analytic[j], numeric, self.floor);
            }
        }
        Ok(report)
    }

    /// Checks gradients with respect to the trainable tensors of a store.
    pub fn params<F>(
        &self,
        store: &ParamStore<f64>,
        only: Option<&[ParamId]>,
        f: F,
        rng: &mut impl Rng,
    ) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>) -> Result<Var>,
    {
        let grads = {
            let mut tape = Tape::new(store);
            let out = f(&mut tape)?;
            tape.backward(out)?
        };
        let mut work = store.clone();
        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            let mut tape = Tape::new(s);
            let out = f(&mut tape)?;
            Ok(tape.scalar_value(out))
        };

        let ids: Vec<ParamId> = match only {
            Some(ids) => ids.to_vec(),
            None => store.ids().collect(),
        };
        let mut report = GradReport::default();
        for id in ids {
            if !store.get(id).requires_grad() {
                continue;
            }
            let n = store.get(id).numel();
            let analytic = grads
                .param(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; n]);
            for j in probe_indices(n, self.max_probes, rng) {
                let orig = work.get(id).data()[j];
                work.get_mut(id).data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work.get_mut(id).data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work.get_mut(id).data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                report.record(store.name(id), j, analytic[j], numeric, self.floor);
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AttentionSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_ok(report: &GradReport) {
        assert!(
            report.max_rel_err <= 1e-5,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn elementwise_and_reductions() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[4], &mut rng)];
            let report = GradCheck::default()
                .leaves(
                    &inputs,
                    |t, v| {
                        let a = t.mul(v[0], v[1])?;
                        let b = t.add_row(a, v[2])?;
                        let c = t.mul_row(b, v[2])?;
                        let d = t.gelu(c);
                        let e = t.sub(d, v[0])?;
                        let f = t.exp(e);
                        let g = t.add_scalar(f, 1.0);
                        let h = t.log(g);
                        let sq = t.powf(g, 2.0);
                        let s = t.add(h, sq)?;
                        Ok(t.mean(s))
                    },
                    &mut rng,
                )
                .unwrap();
            assert_ok(&report);
        }
    }

    #[test]
    fn matmul_softmax_layer_norm() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs = vec![
                random(&[3, 5], &mut rng),
                random(&[5, 4], &mut rng),
                random(&[4], &mut rng),
                random(&[4], &mut rng),
                random(&[3, 4], &mut rng),
            ];
            let report = GradCheck::default()
                .leaves(
                    &inputs,
                    |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        let n = t.layer_norm(y, v[2], v[3], 1e-5)?;
                        let s = t.softmax(n)?;
                        let l = t.log_softmax(y)?;
                        let a = t.mul(s, v[4])?;
                        let b = t.mul(l, v[4])?;
                        let c = t.add(a, b)?;
                        Ok(t.sum(c))
                    },
                    &mut rng,
                )
                .unwrap();
            assert_ok(&report);
        }
    }

    #[test]
    fn gather_concat_select_group_mean_scale_rows() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let inputs = vec![random(&[4, 3], &mut rng), random(&[2, 3], &mut rng), random(&[4], &mut rng)];
            let report = GradCheck::default()
                .leaves(
                    &inputs,
                    |t, v| {
                        let g = t.gather_rows(v[0], &[3, 0, 0, 2])?;
                        let g = t.scale_rows(g, v[2])?;
                        let c = t.concat_rows(&[g, v[1]])?;
                        let m = t.group_mean(c, 2)?;
                        let h = t.huber(m, 0.25);
                        let s = t.select(c, &[0, 5, 7, 17])?;
                        let s2 = t.mul(s, s)?;
                        let a = t.sum(h);
                        let b = t.sum(s2);
                        t.add(a, b)
                    },
                    &mut rng,
                )
                .unwrap();
            assert_ok(&report);
        }
    }

    #[test]
    fn masked_attention() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let (batch, lq, lk, dim) = (2, 3, 4, 4);
            let allowed: Vec<bool> = (0..lq * lk).map(|i| i % lk == 0 || rng.gen_bool(0.6)).collect();
            let spec = AttentionSpec {
                batch,
                heads: 2,
                q_len: lq,
                k_len: lk,
                dim,
                allowed: Some(Arc::new(allowed)),
            };
            let inputs = vec![
                random(&[batch * lq, dim], &mut rng),
                random(&[batch * lk, dim], &mut rng),
                random(&[batch * lk, dim], &mut rng),
                random(&[batch * lq, dim], &mut rng),
            ];
            let report = GradCheck::default()
                .leaves(
                    &inputs,
                    |t, v| {
                        let o = t.attention(v[0], v[1], v[2], spec.clone())?;
                        let w = t.mul(o, v[3])?;
                        Ok(t.sum(w))
                    },
                    &mut rng,
                )
                .unwrap();
            assert_ok(&report);
        }
    }
}
