//! Ground-truth labeling strategies for OOD samples.
//!
//! These read the hidden OOD flags and true classes, so they serve only as
//! analysis references for what a pseudo-labeler could achieve.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{LabelSpace, PseudoLabelSet};

/// Injective map from OOD class rank to ID class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReassignMap(Vec<usize>);

impl ReassignMap {
    pub fn new(targets: Vec<usize>) -> Result<Self> {
        let mut seen = HashSet::new();
        for &t in &targets {
            if !seen.insert(t) {
                return Err(Error::NonInjectiveMap(t));
            }
        }
        Ok(Self(targets))
    }

    pub fn targets(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Drop all OOD samples.
    Baseline,
    /// Send each OOD class to a distinct ID class.
    ReAssigned(ReassignMap),
    /// One shared extra class for every OOD sample.
    OpenSet,
    /// One extra class per true OOD class.
    Oracle,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::ReAssigned(_) => "reassigned",
            Self::OpenSet => "open_set",
            Self::Oracle => "oracle",
        }
    }
}

/// Distinct OOD classes present in the pool, ascending.
fn ood_classes(ground_truth: &[Option<usize>], ood_mask: &[bool]) -> Result<Vec<usize>> {
    let mut classes = BTreeSet::new();
    for (i, (&truth, &ood)) in ground_truth.iter().zip(ood_mask).enumerate() {
        if ood {
            classes.insert(truth.ok_or(Error::UnknownGroundTruth(i))?);
        }
    }
    Ok(classes.into_iter().collect())
}

/// Labels the OOD samples of a pool; ID samples are never touched.
pub fn label_ood(
    ground_truth: &[Option<usize>],
    ood_mask: &[bool],
    kind: &StrategyKind,
    ls: &LabelSpace,
) -> Result<PseudoLabelSet> {
    if ground_truth.len() != ood_mask.len() {
        return Err(Error::DimensionMismatch {
            what: "ground truth vs OOD mask",
            expected: ood_mask.len(),
            actual: ground_truth.len(),
        });
    }
    let mut set = PseudoLabelSet::new(ls.total());
    if matches!(kind, StrategyKind::Baseline) {
        return Ok(set);
    }
    let classes = ood_classes(ground_truth, ood_mask)?;
    let rank = |truth: usize| classes.binary_search(&truth).expect("class collected above");

    let needed = match kind {
        StrategyKind::OpenSet => 1,
        StrategyKind::Oracle => classes.len(),
        _ => 0,
    };
    if ls.k_extra() < needed {
        return Err(Error::InsufficientExtraClasses {
            needed,
            available: ls.k_extra(),
        });
    }
    if let StrategyKind::ReAssigned(map) = kind {
        if map.targets().len() < classes.len() {
            return Err(Error::DimensionMismatch {
                what: "re-assignment map entries vs OOD classes",
                expected: classes.len(),
                actual: map.targets().len(),
            });
        }
        if let Some(&bad) = map.targets().iter().find(|&&t| t >= ls.k_id()) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                total: ls.k_id(),
            });
        }
    }

    for (i, (&truth, &ood)) in ground_truth.iter().zip(ood_mask).enumerate() {
        if !ood {
            continue;
        }
        let r = rank(truth.expect("checked in ood_classes"));
        let class = match kind {
            StrategyKind::Baseline => unreachable!(),
            StrategyKind::ReAssigned(map) => map.targets()[r],
            StrategyKind::OpenSet => ls.extra_class(0),
            StrategyKind::Oracle => ls.extra_class(r),
        };
        set.insert(i, class)?;
    }
    Ok(set)
}

/// Number of injective maps from `k_ood` items into `k_id`, saturating.
pub fn injective_map_count(k_id: usize, k_ood: usize) -> usize {
    if k_ood > k_id {
        return 0;
    }
    (0..k_ood).fold(1usize, |acc, i| acc.saturating_mul(k_id - i))
}

fn enumerate_maps(k_id: usize, k_ood: usize) -> Vec<Vec<usize>> {
    fn extend(k_id: usize, k_ood: usize, prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k_ood {
            out.push(prefix.clone());
            return;
        }
        for t in 0..k_id {
            if !used[t] {
                used[t] = true;
                prefix.push(t);
                extend(k_id, k_ood, prefix, used, out);
                prefix.pop();
                used[t] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(k_id, k_ood, &mut Vec::new(), &mut vec![false; k_id], &mut out);
    out
}

/// Above this many candidate maps, sample by rejection instead of enumerating.
const ENUMERATION_LIMIT: usize = 50_000;

/// Draws `count` distinct injective OOD-to-ID maps; returns every map when fewer exist.
pub fn sample_reassignments(k_id: usize, k_ood: usize, count: usize, seed: u64) -> Result<Vec<ReassignMap>> {
    if k_ood > k_id {
        return Err(Error::TooManyOodClasses { k_ood, k_id });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let available = injective_map_count(k_id, k_ood);
    let maps = if available <= ENUMERATION_LIMIT {
        let mut all = enumerate_maps(k_id, k_ood);
        if count < all.len() {
            all.shuffle(&mut rng);
            all.truncate(count);
        }
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(count);
        let mut ids: Vec<usize> = (0..k_id).collect();
        while out.len() < count {
            let (head, _) = ids.partial_shuffle(&mut rng, k_ood);
            let map = head.to_vec();
            if seen.insert(map.clone()) {
                out.push(map);
            }
        }
        out
    };
    maps.into_iter().map(ReassignMap::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_is_empty() {
        let ls = LabelSpace::new(2, 0).unwrap();
        let set = label_ood(&[Some(2), Some(0)], &[true, false], &StrategyKind::Baseline, &ls).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn open_set_uses_one_extra_class() {
        let ls = LabelSpace::new(6, 1).unwrap();
        let truth = [Some(6), Some(1), Some(8), Some(7)];
        let mask = [true, false, true, true];
        let set = label_ood(&truth, &mask, &StrategyKind::OpenSet, &ls).unwrap();
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![(0, 6), (2, 6), (3, 6)]);

        let no_extra = LabelSpace::new(6, 0).unwrap();
        assert!(matches!(
            label_ood(&truth, &mask, &StrategyKind::OpenSet, &no_extra),
            Err(Error::InsufficientExtraClasses { needed: 1, available: 0 })
        ));
    }

    #[test]
    fn oracle_partitions_by_ground_truth() {
        let ls = LabelSpace::new(6, 4).unwrap();
        let truth: Vec<Option<usize>> = (0..40).map(|i| Some(i % 10)).collect();
        let mask: Vec<bool> = truth.iter().map(|t| t.unwrap() >= 6).collect();
        let set = label_ood(&truth, &mask, &StrategyKind::Oracle, &ls).unwrap();
        assert_eq!(set.len(), 16);
        for (sample, class) in set.iter() {
            assert_eq!(class, truth[sample].unwrap());
        }
        let distinct: BTreeSet<usize> = set.iter().map(|(_, c)| c).collect();
        assert_eq!(distinct.len(), 4);

        let small = LabelSpace::new(6, 3).unwrap();
        assert!(label_ood(&truth, &mask, &StrategyKind::Oracle, &small).is_err());
    }

    #[test]
    fn oracle_ranks_present_classes() {
        let ls = LabelSpace::new(3, 2).unwrap();
        let truth = [Some(9), Some(4), Some(9), Some(0)];
        let mask = [true, true, true, false];
        let set = label_ood(&truth, &mask, &StrategyKind::Oracle, &ls).unwrap();
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![(0, 4), (1, 3), (2, 4)]);
    }

    #[test]
    fn reassigned_follows_map() {
        let ls = LabelSpace::new(3, 0).unwrap();
        let truth = [Some(3), Some(4), Some(1), Some(3)];
        let mask = [true, true, false, true];
        let map = ReassignMap::new(vec![2, 0]).unwrap();
        let set = label_ood(&truth, &mask, &StrategyKind::ReAssigned(map), &ls).unwrap();
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![(0, 2), (1, 0), (3, 2)]);

        assert!(matches!(ReassignMap::new(vec![1, 1]), Err(Error::NonInjectiveMap(1))));
        let out_of_range = ReassignMap::new(vec![5, 0]).unwrap();
        assert!(label_ood(&truth, &mask, &StrategyKind::ReAssigned(out_of_range), &ls).is_err());
    }

    #[test]
    fn missing_truth_on_ood_sample_is_an_error() {
        let ls = LabelSpace::new(2, 1).unwrap();
        assert!(matches!(
            label_ood(&[None, Some(2)], &[true, true], &StrategyKind::OpenSet, &ls),
            Err(Error::UnknownGroundTruth(0))
        ));
        // ID samples may lack ground truth.
        assert!(label_ood(&[None, Some(2)], &[false, true], &StrategyKind::OpenSet, &ls).is_ok());
    }

    #[test]
    fn reassignment_sampling() {
        let single = sample_reassignments(1, 1, 1, 0).unwrap();
        assert_eq!(single, vec![ReassignMap::new(vec![0]).unwrap()]);

        let all = sample_reassignments(3, 2, 6, 11).unwrap();
        let set: HashSet<Vec<usize>> = all.iter().map(|m| m.targets().to_vec()).collect();
        let expected: HashSet<Vec<usize>> = [[0, 1], [0, 2], [1, 0], [1, 2], [2, 0], [2, 1]]
            .iter()
            .map(|m| m.to_vec())
            .collect();
        assert_eq!(set, expected);

        assert_eq!(sample_reassignments(6, 4, 10, 5).unwrap(), sample_reassignments(6, 4, 10, 5).unwrap());
        let ten = sample_reassignments(6, 4, 10, 5).unwrap();
        assert_eq!(ten.iter().collect::<HashSet<_>>().len(), 10);
        assert!(matches!(sample_reassignments(2, 3, 1, 0), Err(Error::TooManyOodClasses { .. })));
    }

    #[test]
    fn rejection_sampling_for_large_spaces() {
        assert!(injective_map_count(20, 8) > ENUMERATION_LIMIT);
        let maps = sample_reassignments(20, 8, 25, 3).unwrap();
        assert_eq!(maps.len(), 25);
        assert_eq!(maps.iter().collect::<HashSet<_>>().len(), 25);
        for m in &maps {
            assert_eq!(m.targets().iter().collect::<HashSet<_>>().len(), 8);
            assert!(m.targets().iter().all(|&t| t < 20));
        }
    }

    #[test]
    fn map_count() {
        assert_eq!(injective_map_count(3, 2), 6);
        assert_eq!(injective_map_count(6, 4), 360);
        assert_eq!(injective_map_count(4, 0), 1);
        assert_eq!(injective_map_count(2, 3), 0);
    }
}
