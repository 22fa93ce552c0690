//! Hierarchical parallel planner: nested timestep scales, the hybrid
//! causal mask, and one-pass decoding of all candidate trajectories.

mod bank;
mod decode;

use std::fmt;
use std::str::FromStr;

use crate::backbone::{AttentionMask, Role, Slot};
use crate::error::{Error, Result};

pub use bank::MetaActionBank;
pub use decode::{build_targets, wta_loss, Candidate, DecodeOut, PlanOutput, PlanRecord, PlannerHeads, WtaLoss, WAYPOINT_SCALE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Single,
    Sequential,
    Reverse,
    Interpolate,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::Sequential => "sequential",
            Strategy::Reverse => "reverse",
            Strategy::Interpolate => "interpolate",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Strategy::Single),
            "sequential" => Ok(Strategy::Sequential),
            "reverse" => Ok(Strategy::Reverse),
            "interpolate" => Ok(Strategy::Interpolate),
            _ => Err(Error::config(format!("unknown scale strategy `{s}`"))),
        }
    }
}

/// Nested timestep sets `I_1 ⊂ … ⊂ I_S = {0..T−1}`, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub horizon: usize,
    pub strategy: Strategy,
    pub sets: Vec<Vec<usize>>,
}

impl StagePlan {
    pub fn new(horizon: usize, scales: usize, strategy: Strategy) -> Result<Self> {
        if scales == 0 {
            return Err(Error::config("at least one scale is required"));
        }
        if horizon < scales {
            return Err(Error::config(format!(
                "horizon {horizon} is shorter than {scales} scales"
            )));
        }
        let full: Vec<usize> = (0..horizon).collect();
        let sets = match strategy {
            Strategy::Single => vec![full],
            Strategy::Sequential => (1..=scales)
                .map(|s| (0..(s * horizon).div_ceil(scales)).collect())
                .collect(),
            Strategy::Reverse => (1..=scales)
                .map(|s| (horizon - (s * horizon).div_ceil(scales)..horizon).collect())
                .collect(),
            Strategy::Interpolate => interpolate(horizon, scales),
        };
        Ok(Self {
            horizon,
            strategy,
            sets,
        })
    }

    pub fn scales(&self) -> usize {
        self.sets.len()
    }

    pub fn targets(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// Dyadic refinement from the endpoint: each scale inserts the midpoints of
/// the gaps left by the previous one, largest gaps first, keeping room for
/// every later scale to add at least one step.
fn interpolate(horizon: usize, scales: usize) -> Vec<Vec<usize>> {
    if scales == 1 {
        return vec![(0..horizon).collect()];
    }
    let mut sets = vec![vec![horizon - 1]];
    for s in 2..scales {
        let prev = sets.last().expect("non-empty");
        let capacity = horizon - (scales - s);
        let mut gaps: Vec<(usize, usize)> = Vec::new();
        let mut lo: isize = -1;
        for &t in prev {
            if t as isize - lo >= 2 {
                let mid = ((lo + t as isize) / 2) as usize;
                gaps.push((t - mid, mid));
            }
            lo = t as isize;
        }
        gaps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut next = prev.clone();
        for (_, mid) in gaps.into_iter().take(capacity - prev.len()) {
            next.push(mid);
        }
        next.sort_unstable();
        sets.push(next);
    }
    sets.push((0..horizon).collect());
    sets
}

/// `[context; F_1; …; F_S]` with per-position metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub context: usize,
    /// Timesteps of each target block, coarsest scale first.
    pub blocks: Vec<Vec<usize>>,
}

impl SequenceLayout {
    pub fn new(context: usize, blocks: Vec<Vec<usize>>) -> Self {
        Self { context, blocks }
    }

    pub fn from_plan(context: usize, plan: &StagePlan) -> Self {
        Self::new(context, plan.sets.clone())
    }

    pub fn len(&self) -> usize {
        self.context + self.targets()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Layout keeping only the first `scales` target blocks.
    pub fn prefix(&self, scales: usize) -> Self {
        Self::new(self.context, self.blocks[..scales.min(self.blocks.len())].to_vec())
    }

    /// Scale index of position `i`, `None` for context.
    pub fn scale_of(&self, i: usize) -> Option<usize> {
        let mut start = self.context;
        if i < start {
            return None;
        }
        for (s, b) in self.blocks.iter().enumerate() {
            if i < start + b.len() {
                return Some(s);
            }
            start += b.len();
        }
        None
    }

    /// `(scale, timestep)` of every target position in order.
    pub fn target_steps(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(s, b)| b.iter().map(move |&t| (s, t)))
            .collect()
    }

    /// Offset of scale `s`'s block among the target positions.
    pub fn block_offset(&self, s: usize) -> usize {
        self.blocks[..s].iter().map(Vec::len).sum()
    }

    pub fn slots(&self, context_role: Role) -> Vec<Slot> {
        let mut out = vec![Slot::new(context_role); self.context];
        out.extend(self.target_steps().into_iter().map(|(s, t)| Slot::target(s, t)));
        out
    }
}

/// Context is visible to every row; a target at scale `s` also sees targets
/// at scales `s−1` and `s`; context rows see only context.
pub fn build_hybrid_mask(layout: &SequenceLayout) -> Result<AttentionMask> {
    let scale: Vec<Option<usize>> = (0..layout.len()).map(|i| layout.scale_of(i)).collect();
    AttentionMask::from_fn(layout.len(), |i, j| match (scale[i], scale[j]) {
        (_, None) => true,
        (Some(si), Some(sj)) => sj == si || sj + 1 == si,
        (None, Some(_)) => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;

    #[test]
    fn interpolate_example() {
        let p = StagePlan::new(8, 3, Strategy::Interpolate).unwrap();
        assert_eq!(p.sets, vec![vec![7], vec![3, 7], (0..8).collect()]);
        assert_eq!(p.targets(), 11);
    }

    #[test]
    fn sequential_example() {
        let p = StagePlan::new(6, 2, Strategy::Sequential).unwrap();
        assert_eq!(p.sets, vec![vec![0, 1, 2], (0..6).collect()]);
        let r = StagePlan::new(6, 2, Strategy::Reverse).unwrap();
        assert_eq!(r.sets, vec![vec![3, 4, 5], (0..6).collect()]);
    }

    #[test]
    fn single_and_errors() {
        let p = StagePlan::new(8, 1, Strategy::Single).unwrap();
        assert_eq!(p.sets, vec![(0..8).collect::<Vec<_>>()]);
        assert!(matches!(StagePlan::new(2, 3, Strategy::Interpolate), Err(Error::Config(_))));
        assert!("zigzag".parse::<Strategy>().is_err());
    }

    #[test]
    fn hand_enumerated_mask() {
        let layout = SequenceLayout::new(2, vec![vec![1], vec![0, 1]]);
        assert_eq!(layout.len(), 5);
        let m = build_hybrid_mask(&layout).unwrap();
        let rows: Vec<Vec<usize>> = (0..5).map(|i| m.visible(i)).collect();
        assert_eq!(
            rows,
            vec![vec![0, 1], vec![0, 1], vec![0, 1, 2], vec![0, 1, 2, 3, 4], vec![0, 1, 2, 3, 4]]
        );
    }

    #[test]
    fn single_scale_is_context_prefixed_bidirectional() {
        let layout = SequenceLayout::from_plan(3, &StagePlan::new(4, 1, Strategy::Single).unwrap());
        let m = build_hybrid_mask(&layout).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(m.is_allowed(i, j), j < 3 || i >= 3);
            }
        }
    }

    fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
        prop_oneof![
            Just(Strategy::Single),
            Just(Strategy::Sequential),
            Just(Strategy::Reverse),
            Just(Strategy::Interpolate),
        ]
    }

    proptest! {
        #[test]
        fn plans_are_strictly_nested(t in 1usize..=16, s in 1usize..=5, st in strategy()) {
            prop_assume!(t >= s);
            let p = StagePlan::new(t, s, st).unwrap();
            prop_assert_eq!(p.sets.last().unwrap(), &(0..t).collect::<Vec<_>>());
            for w in p.sets.windows(2) {
                prop_assert!(w[0].len() < w[1].len());
                prop_assert!(w[0].iter().all(|x| w[1].contains(x)));
            }
            for set in &p.sets {
                prop_assert!(set.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(set.iter().all(|&x| x < t));
            }
        }

        #[test]
        fn no_row_sees_a_finer_scale(c in 0usize..6, t in 1usize..=12, s in 1usize..=4, st in strategy()) {
            prop_assume!(t >= s && c + t > 0);
            let layout = SequenceLayout::from_plan(c, &StagePlan::new(t, s, st).unwrap());
            let m = build_hybrid_mask(&layout).unwrap();
            for i in 0..layout.len() {
                for j in 0..layout.len() {
                    if let (Some(si), Some(sj)) = (layout.scale_of(i), layout.scale_of(j)) {
                        if sj > si {
                            prop_assert!(!m.is_allowed(i, j));
                        }
                    }
                }
            }
        }
    }
}
