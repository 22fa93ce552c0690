use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Family;
use crate::error::{Error, Result};

/// Mean pointwise Euclidean distance between two equal-length trajectories.
pub fn mean_l2(a: &[[f32; 2]], b: &[[f32; 2]]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]) as f64).hypot((p[1] - q[1]) as f64))
        .sum::<f64>()
        / n as f64
}

/// k-means centroids over flattened trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<[f32; 2]>>,
    pub names: Vec<String>,
    /// Sum-of-squares objective after each Lloyd iteration of the kept run.
    pub objective: Vec<f64>,
    /// Nearest centroid of every fitted trajectory under [`mean_l2`].
    pub assignments: Vec<usize>,
}

impl ClusterModel {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Nearest centroid under mean pointwise L2; ties go to the lower index.
    pub fn assign(&self, traj: &[[f32; 2]]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (c, cen) in self.centroids.iter().enumerate() {
            let d = mean_l2(traj, cen);
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    /// Sets every sample's label to its nearest cluster.
    pub fn relabel(&self, samples: &mut [super::SceneSample]) {
        for s in samples {
            s.label = self.assign(&s.gt);
        }
    }

    /// Majority family of each cluster, or `None` for a cluster with no members.
    pub fn majority(&self, families: &[Family]) -> Vec<Option<Family>> {
        let mut counts = vec![[0usize; 8]; self.len()];
        for (&a, f) in self.assignments.iter().zip(families) {
            counts[a][f.index()] += 1;
        }
        counts
            .iter()
            .map(|c| {
                let (i, &n) = c.iter().enumerate().max_by_key(|&(i, n)| (*n, std::cmp::Reverse(i)))?;
                (n > 0).then_some(Family::ALL[i])
            })
            .collect()
    }

    /// Fraction of fitted trajectories whose cluster's majority family is their own.
    pub fn agreement(&self, families: &[Family]) -> f64 {
        let maj = self.majority(families);
        let hits = self
            .assignments
            .iter()
            .zip(families)
            .filter(|(&a, &f)| maj[a] == Some(f))
            .count();
        hits as f64 / families.len().max(1) as f64
    }

    /// Names clusters after their majority family and orders them by family,
    /// so that well-separated data gets `label == family index`.
    pub fn name_by_majority(&mut self, families: &[Family]) {
        let maj = self.majority(families);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&c| (maj[c].map_or(usize::MAX, Family::index), c));
        let mut seen = std::collections::HashMap::new();
        let names: Vec<String> = order
            .iter()
            .map(|&c| {
                let base = maj[c].map_or("unused", Family::name);
                let k = seen.entry(base).or_insert(0usize);
                *k += 1;
                if *k == 1 {
                    base.to_owned()
                } else {
                    format!("{base}_{k}")
                }
            })
            .collect();
        let mut rank = vec![0; self.len()];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new;
        }
        self.centroids = order.iter().map(|&c| self.centroids[c].clone()).collect();
        self.names = names;
        for a in &mut self.assignments {
            *a = rank[*a];
        }
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], cents: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in cents.iter().enumerate() {
        let d = sq(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

struct Run {
    cents: Vec<Vec<f64>>,
    history: Vec<f64>,
}

fn lloyd(xs: &[Vec<f64>], c: usize, iters: usize, rng: &mut impl Rng) -> Run {
    let n = xs.len();
    let mut cents = vec![xs[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = xs.iter().map(|x| sq(x, &cents[0])).collect();
    while cents.len() < c {
        let total: f64 = d2.iter().sum();
        let mut r = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && r < d {
                pick = i;
                break;
            }
            r -= d;
        }
        if d2[pick] == 0.0 {
            pick = (0..n).rev().find(|&i| d2[i] > 0.0).expect("enough distinct points");
        }
        cents.push(xs[pick].clone());
        for (d, x) in d2.iter_mut().zip(xs) {
            *d = d.min(sq(x, &cents[cents.len() - 1]));
        }
    }

    let dim = xs[0].len();
    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut cost = vec![0.0; n];
        for (i, x) in xs.iter().enumerate() {
            let (a, d) = nearest(x, &cents);
            changed |= assign[i] != a;
            assign[i] = a;
            cost[i] = d;
        }
        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (x, &a) in xs.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                cents[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            } else {
                // Re-seed on the worst-served point; this can only lower the objective.
                let far = (0..n)
                    .max_by(|&i, &j| cost[i].total_cmp(&cost[j]).then(j.cmp(&i)))
                    .expect("non-empty");
                cents[k] = xs[far].clone();
                cost[far] = 0.0;
                assign[far] = k;
                changed = true;
            }
        }
        history.push(xs.iter().map(|x| nearest(x, &cents).1).sum());
        if !changed {
            break;
        }
    }
    Run { cents, history }
}

/// k-means with k-means++ seeding over flattened trajectories, keeping the
/// best of `restarts` runs by sum of squares. Assignments use [`mean_l2`].
pub fn fit_clusters(
    trajectories: &[Vec<[f32; 2]>],
    c: usize,
    iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterModel> {
    if c == 0 {
        return Err(Error::config("cluster count must be positive"));
    }
    let mut distinct: Vec<Vec<u32>> = trajectories
        .iter()
        .map(|t| t.iter().flat_map(|p| [p[0].to_bits(), p[1].to_bits()]).collect())
        .collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < c {
        return Err(Error::contract(format!(
            "{} distinct trajectories cannot form {c} clusters",
            distinct.len()
        )));
    }
    let len = trajectories[0].len();
    if trajectories.iter().any(|t| t.len() != len) {
        return Err(Error::contract("trajectories differ in length"));
    }
    let xs: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|t| t.iter().flat_map(|p| [p[0] as f64, p[1] as f64]).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Run> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(&xs, c, iters, &mut rng);
        let better = best
            .as_ref()
            .map_or(true, |b| run.history.last() < b.history.last());
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one run");
    let centroids: Vec<Vec<[f32; 2]>> = run
        .cents
        .iter()
        .map(|c| c.chunks(2).map(|p| [p[0] as f32, p[1] as f32]).collect())
        .collect();
    let mut model = ClusterModel {
        names: (0..c).map(|k| format!("cluster{k}")).collect(),
        centroids,
        objective: run.history,
        assignments: Vec::new(),
    };
    model.assignments = trajectories.iter().map(|t| model.assign(t)).collect();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(y: f32, jitter: f32) -> Vec<[f32; 2]> {
        (0..4).map(|t| [t as f32, y + jitter * t as f32]).collect()
    }

    #[test]
    fn two_tight_groups() {
        let mut trajs = Vec::new();
        for k in 0..10 {
            trajs.push(line(0.0, 0.01 * k as f32));
            trajs.push(line(10.0, -0.01 * k as f32));
        }
        let m = fit_clusters(&trajs, 2, 50, 3, 0).unwrap();
        let mut ys: Vec<f32> = m.centroids.iter().map(|c| c[0][1]).collect();
        ys.sort_by(f32::total_cmp);
        assert!(ys[0].abs() < 1e-5 && (ys[1] - 10.0).abs() < 1e-5);
        for (t, &a) in trajs.iter().zip(&m.assignments) {
            assert_eq!(a, m.assign(t));
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let trajs = vec![line(0.0, 0.0), line(2.0, 1.0), line(4.0, -0.5)];
        let m = fit_clusters(&trajs, 1, 10, 1, 9).unwrap();
        for t in 0..4 {
            let mx: f32 = trajs.iter().map(|tr| tr[t][0]).sum::<f32>() / 3.0;
            let my: f32 = trajs.iter().map(|tr| tr[t][1]).sum::<f32>() / 3.0;
            assert!((m.centroids[0][t][0] - mx).abs() < 1e-5);
            assert!((m.centroids[0][t][1] - my).abs() < 1e-5);
        }
    }

    #[test]
    fn too_few_distinct_inputs() {
        let trajs = vec![line(1.0, 0.0); 5];
        assert!(fit_clusters(&trajs, 2, 10, 1, 0).is_err());
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trajs: Vec<Vec<[f32; 2]>> = (0..200)
            .map(|_| (0..4).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect())
            .collect();
        for seed in 0..5 {
            let m = fit_clusters(&trajs, 6, 100, 1, seed).unwrap();
            assert!(m.objective.len() > 1);
            for w in m.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", m.objective);
            }
        }
    }
}
