//! Fixed allocation strategies used as comparison points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{project_action, JointAction, SlicePlacement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Random,
    Full,
    StaticPortion,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Full => "full",
            BaselineKind::StaticPortion => "static",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(Self::Random),
            "full" => Some(Self::Full),
            "static" | "static-portion" => Some(Self::StaticPortion),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("static fractions: {0}")]
pub struct BaselineError(String);

#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
    /// Per-slice `(cpu, bw)` shares for [`BaselineKind::StaticPortion`].
    pub fractions: Vec<(f64, f64)>,
}

impl BaselinePolicy {
    /// Static fractions default to `1/S` of each resource per slice.
    pub fn new(kind: BaselineKind, slices: usize) -> Self {
        let share = 1.0 / slices as f64;
        Self { kind, fractions: vec![(share, share); slices] }
    }

    pub fn with_fractions(
        kind: BaselineKind,
        fractions: Vec<(f64, f64)>,
        placements: &[SlicePlacement],
    ) -> Result<Self, BaselineError> {
        if fractions.len() != placements.len() {
            return Err(BaselineError(format!("need {} entries, got {}", placements.len(), fractions.len())));
        }
        if fractions.iter().any(|&(c, b)| !(0.0..=1.0).contains(&c) || !(0.0..=1.0).contains(&b)) {
            return Err(BaselineError("entries must lie in [0, 1]".into()));
        }
        for (i, p) in placements.iter().enumerate() {
            let cpu: f64 = placements.iter().zip(&fractions).filter(|(q, _)| q.node == p.node).map(|(_, f)| f.0).sum();
            let bw: f64 = placements.iter().zip(&fractions).filter(|(q, _)| q.link == p.link).map(|(_, f)| f.1).sum();
            if cpu > 1.0 + 1e-12 || bw > 1.0 + 1e-12 {
                return Err(BaselineError(format!("shares around slice {i} exceed 1")));
            }
        }
        Ok(Self { kind, fractions })
    }

    pub fn act<R: Rng + ?Sized>(&self, placements: &[SlicePlacement], rng: &mut R) -> JointAction {
        let n = placements.len();
        let raw: Vec<f64> = match self.kind {
            BaselineKind::Random => (0..2 * n).map(|_| rng.random::<f64>()).collect(),
            BaselineKind::Full => vec![1.0; 2 * n],
            BaselineKind::StaticPortion => self.fractions.iter().flat_map(|&(c, b)| [c, b]).collect(),
        };
        project_action(&raw, placements)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SeededRng;
    use proptest::prelude::*;

    fn shared(n: usize) -> Vec<SlicePlacement> {
        vec![SlicePlacement { node: 0, link: 0 }; n]
    }

    #[test]
    fn full_splits_equally() {
        let mut rng = SeededRng::new(0, 0).rng();
        let a = BaselinePolicy::new(BaselineKind::Full, 2).act(&shared(2), &mut rng);
        assert_eq!(a.flat(), vec![0.5; 4]);
    }

    #[test]
    fn static_default_thirds() {
        let mut rng = SeededRng::new(0, 0).rng();
        let a = BaselinePolicy::new(BaselineKind::StaticPortion, 3).act(&shared(3), &mut rng);
        assert_eq!(a.flat(), vec![1.0 / 3.0; 6]);
    }

    #[test]
    fn static_rejects_oversubscription() {
        assert!(BaselinePolicy::with_fractions(BaselineKind::StaticPortion, vec![(0.6, 0.2), (0.6, 0.2)], &shared(2)).is_err());
        let apart = [SlicePlacement { node: 0, link: 0 }, SlicePlacement { node: 1, link: 1 }];
        assert!(BaselinePolicy::with_fractions(BaselineKind::StaticPortion, vec![(0.6, 0.9), (0.6, 0.9)], &apart).is_ok());
    }

    #[test]
    fn random_always_feasible() {
        let mut rng = SeededRng::new(5, 0).rng();
        let pol = BaselinePolicy::new(BaselineKind::Random, 3);
        for _ in 0..10_000 {
            let a = pol.act(&shared(3), &mut rng);
            assert!(a.cpu.iter().sum::<f64>() <= 1.0 + 1e-12);
            assert!(a.bw.iter().sum::<f64>() <= 1.0 + 1e-12);
            assert!(a.flat().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    proptest! {
        #[test]
        fn projection_feasible(raw in proptest::collection::vec(-2.0f64..3.0, 6)) {
            let a = project_action(&raw, &shared(3));
            prop_assert!(a.cpu.iter().sum::<f64>() <= 1.0 + 1e-12);
            prop_assert!(a.bw.iter().sum::<f64>() <= 1.0 + 1e-12);
            prop_assert!(a.flat().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
