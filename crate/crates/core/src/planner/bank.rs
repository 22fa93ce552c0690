use rand::Rng;

use crate::backbone::Linear;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::world::ClusterModel;

/// Centroid coordinates are divided by this before projection.
const CENTROID_SCALE: f32 = 10.0;

/// `C` maneuver embeddings: a trainable linear map of a fixed cluster
/// centroid plus a per-entry offset that starts at zero. Used as the meta
/// queries of the second reasoning pass and as the action query of the
/// planner.
#[derive(Clone, Debug)]
pub struct MetaActionBank {
    pub names: Vec<String>,
    pub centroids: Vec<Vec<[f32; 2]>>,
    /// `[C × 2T]` normalized flattened centroids (not trained).
    pub inputs: ParamId,
    pub proj: Linear,
    /// `[C × D]`, zero at initialization.
    pub offsets: ParamId,
}

impl MetaActionBank {
    pub fn new(store: &mut ParamStore, clusters: &ClusterModel, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::config("meta-action bank needs at least one cluster"));
        }
        let t = clusters.centroids[0].len();
        let flat: Vec<f32> = clusters
            .centroids
            .iter()
            .flat_map(|c| c.iter().flat_map(|p| [p[0] / CENTROID_SCALE, p[1] / CENTROID_SCALE]))
            .collect();
        let inputs = store.add_buffer("bank.centroids", Tensor::new(&[clusters.len(), 2 * t], flat)?);
        let proj = Linear::new(store, "bank.proj", 2 * t, dim, rng);
        let offsets = store.add(
            "bank.offsets",
            Tensor::new(&[clusters.len(), dim], vec![0.0; clusters.len() * dim])?.with_requires_grad(true),
        );
        Ok(Self {
            names: clusters.names.clone(),
            centroids: clusters.centroids.clone(),
            inputs,
            proj,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// All entries as a `[C × D]` tape variable.
    pub fn entries<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let x = tape.param(self.inputs);
        let p = self.proj.forward(tape, x)?;
        let o = tape.param(self.offsets);
        tape.add(p, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clusters(cents: Vec<Vec<[f32; 2]>>) -> ClusterModel {
        ClusterModel {
            names: (0..cents.len()).map(|i| format!("c{i}")).collect(),
            centroids: cents,
            objective: vec![],
            assignments: vec![],
        }
    }

    #[test]
    fn shape_and_identical_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = vec![vec![[1.0, 2.0]; 4], vec![[1.0, 2.0]; 4], vec![[5.0, 0.0]; 4]];
        let bank = MetaActionBank::new(&mut store, &clusters(c), 16, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let e = bank.entries(&mut tape).unwrap();
        assert_eq!(tape.shape(e), &[3, 16]);
        assert_eq!(tape.value(e).row(0), tape.value(e).row(1));
        assert_ne!(tape.value(e).row(0), tape.value(e).row(2));
        assert!(!store.get(bank.inputs).requires_grad());
        assert!(store.get(bank.proj.w).requires_grad());
    }
}
