//! Per-clip power sets and the subset scoring function.
//!
//! For an actor with class logits `s` and detection confidence `d`, the score of
//! a non-empty subset `ω ⊆ L` is
//!
//! ```text
//! p(ω) = d · exp(Σ_{c∈ω} s_c) / Σ_{∅≠ω'⊆L} exp(Σ_{c∈ω'} s_c)
//! ```
//!
//! The denominator factorises as `∏_{c∈L}(1 + e^{s_c}) − 1`, so it is evaluated
//! in O(|L|) with a log-space recurrence that never subtracts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ActionSubset, ActorDetection, LabelSet, MAX_CLASSES};

pub const DEFAULT_POWERSET_CAP: usize = 20;

/// Hard ceiling on any configured cap; tables are materialised in memory.
pub const MAX_POWERSET_CAP: usize = 30;

fn check_cap(labels: &LabelSet, cap: usize) -> Result<()> {
    let cap = cap.min(MAX_POWERSET_CAP);
    if labels.len() > cap {
        return Err(Error::PowerSetTooLarge {
            size: labels.len(),
            cap,
        });
    }
    if let Some(&c) = labels.classes().last() {
        if c >= MAX_CLASSES {
            return Err(Error::invalid(
                "label set",
                "labels",
                format!("label index out of range: {c} >= {MAX_CLASSES}"),
            ));
        }
    }
    Ok(())
}

/// All `2^|L|` subsets of `labels` including `∅`, ascending by local mask.
pub fn enumerate_power_set(labels: &LabelSet, cap: usize) -> Result<Vec<ActionSubset>> {
    check_cap(labels, cap)?;
    Ok((0..1u64 << labels.len())
        .map(|m| labels.subset_from_local(m))
        .collect())
}

/// `Σ_{c∈ω} s_c`, summed in ascending class order; `0` for `∅`.
pub fn subset_log_numerator(subset: ActionSubset, logits: &[f64]) -> Result<f64> {
    if subset.span() > logits.len() {
        return Err(Error::Shape(format!(
            "subset references class {} but only {} logits given",
            subset.span() - 1,
            logits.len()
        )));
    }
    let mut acc = 0.0;
    for c in subset.classes() {
        let s = logits[c];
        if !s.is_finite() {
            return Err(Error::invalid(
                format!("class {c}"),
                "logits",
                "non-finite logit",
            ));
        }
        acc += s;
    }
    Ok(acc)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log Σ_{∅≠ω⊆L} exp(Σ_{c∈ω} s_c) = log(∏_{c∈L}(1+e^{s_c}) − 1)`.
///
/// Uses `P_k = P_{k-1}·(1+e^{s_k}) + e^{s_k}` in log space, which only adds
/// positive terms.
pub fn log_normalizer(logits: &[f64], labels: &LabelSet) -> Result<f64> {
    let classes = labels.classes();
    if classes.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let mut acc: Option<f64> = None;
    for &c in classes {
        let s = *logits.get(c).ok_or_else(|| {
            Error::Shape(format!(
                "label {c} has no logit ({} logits given)",
                logits.len()
            ))
        })?;
        if !s.is_finite() {
            return Err(Error::invalid(
                format!("class {c}"),
                "logits",
                "non-finite logit",
            ));
        }
        acc = Some(match acc {
            None => s,
            Some(prev) => log_add_exp(prev + softplus(s), s),
        });
    }
    Ok(acc.expect("non-empty label set"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub subset: ActionSubset,
    /// `p(ω)`, already scaled by the detection confidence.
    pub score: f64,
    /// `ln p(ω)`; `-inf` when the confidence is zero.
    pub log_score: f64,
}

/// Scores of every non-empty subset of a clip's label set for one actor.
///
/// `entries[m - 1]` holds the subset with local mask `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScoreTable {
    pub actor_id: u64,
    pub labels: LabelSet,
    pub confidence: f64,
    pub log_normalizer: f64,
    pub entries: Vec<SubsetScore>,
}

impl SubsetScoreTable {
    /// Score of the subset with local mask `mask` (non-zero).
    #[inline]
    pub fn score_by_mask(&self, mask: u64) -> f64 {
        self.entries[(mask - 1) as usize].score
    }

    pub fn score_of(&self, subset: ActionSubset) -> Option<f64> {
        match self.labels.local_mask(subset) {
            Some(0) | None => None,
            Some(m) => Some(self.score_by_mask(m)),
        }
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.score).sum()
    }
}

/// Builds the score table for one actor over `Ω(L) ∖ ∅`.
pub fn score_actor_subsets(
    actor: &ActorDetection,
    labels: &LabelSet,
    cap: usize,
) -> Result<SubsetScoreTable> {
    check_cap(labels, cap)?;
    let d = actor.confidence;
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::invalid(
            format!("actor {}", actor.actor_id),
            "confidence",
            format!("confidence out of range: {d}"),
        ));
    }
    let log_z = log_normalizer(&actor.logits, labels)?;
    let classes = labels.classes();
    let k = classes.len();
    let size = 1usize << k;

    // numerators[m] = Σ of logits over local mask m, accumulated in ascending
    // class order so it matches `subset_log_numerator` bit for bit.
    let mut numerators = vec![0.0f64; size];
    let log_d = d.ln();
    let mut entries = Vec::with_capacity(size - 1);
    for m in 1..size {
        let high = usize::BITS - 1 - m.leading_zeros();
        let rest = m & !(1 << high);
        let num = numerators[rest] + actor.logits[classes[high as usize]];
        numerators[m] = num;
        let log_p = num - log_z;
        entries.push(SubsetScore {
            subset: labels.subset_from_local(m as u64),
            score: log_p.exp() * d,
            log_score: log_p + log_d,
        });
    }
    Ok(SubsetScoreTable {
        actor_id: actor.actor_id,
        labels: labels.clone(),
        confidence: d,
        log_normalizer: log_z,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn actor(d: f64, logits: Vec<f64>) -> ActorDetection {
        ActorDetection {
            actor_id: 0,
            frame_id: 0,
            bbox: None,
            confidence: d,
            logits,
        }
    }

    // Oracle: direct log-sum-exp over every non-empty subset.
    fn brute_log_normalizer(logits: &[f64], labels: &LabelSet) -> f64 {
        let k = labels.len();
        let sums: Vec<f64> = (1..1u64 << k)
            .map(|m| {
                labels
                    .classes()
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| m >> j & 1 == 1)
                    .map(|(_, &c)| logits[c])
                    .sum()
            })
            .collect();
        let max = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + sums.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
    }

    #[test]
    fn power_set_of_three_labels() {
        let l = LabelSet::new([0, 1, 2]);
        let ps = enumerate_power_set(&l, DEFAULT_POWERSET_CAP).unwrap();
        assert_eq!(ps.len(), 8);
        assert_eq!(ps[0], ActionSubset::EMPTY);
        let sizes: Vec<usize> = ps.iter().map(|s| s.len()).collect();
        assert_eq!(sizes.iter().filter(|&&n| n == 1).count(), 3);
        assert_eq!(sizes.iter().filter(|&&n| n == 2).count(), 3);
        assert_eq!(ps[7], l.as_subset());
        let mut sorted = ps.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, ps);
    }

    #[test]
    fn power_set_sizes() {
        let l = LabelSet::new([3, 10, 11, 40]);
        assert_eq!(enumerate_power_set(&l, 20).unwrap().len(), 16);
        assert_eq!(
            enumerate_power_set(&LabelSet::empty(), 20).unwrap(),
            vec![ActionSubset::EMPTY]
        );
    }

    #[test]
    fn power_set_cap_is_explicit() {
        let l = LabelSet::new(0..21);
        assert_eq!(
            enumerate_power_set(&l, DEFAULT_POWERSET_CAP).unwrap_err(),
            Error::PowerSetTooLarge { size: 21, cap: 20 }
        );
        let l = LabelSet::new(0..5);
        assert!(score_actor_subsets(&actor(1.0, vec![0.0; 5]), &l, 4).is_err());
    }

    #[test]
    fn numerator_examples() {
        let s = [0.5, -0.25, 3.0];
        assert_eq!(subset_log_numerator(ActionSubset::EMPTY, &s).unwrap(), 0.0);
        assert_eq!(
            subset_log_numerator(ActionSubset::from_classes([1, 2]), &s).unwrap(),
            2.75
        );
        assert_eq!(
            subset_log_numerator(ActionSubset::from_classes([0, 1, 2]), &[0.0; 3]).unwrap(),
            0.0
        );
        assert!(subset_log_numerator(ActionSubset::from_classes([1]), &[0.0, f64::NAN]).is_err());
        assert!(subset_log_numerator(ActionSubset::from_classes([4]), &s).is_err());
    }

    #[test]
    fn normalizer_examples() {
        assert_eq!(log_normalizer(&[0.0], &LabelSet::new([0])).unwrap(), 0.0);
        // brute force: 1 + 1 + 1
        let v = log_normalizer(&[9.0, 0.0, 0.0], &LabelSet::new([1, 2])).unwrap();
        assert_relative_eq!(v, 3f64.ln(), max_relative = 1e-14);
        // brute force: 2 + 1 + 2
        let v = log_normalizer(&[0.0, 2f64.ln(), 0.0], &LabelSet::new([1, 2])).unwrap();
        assert_relative_eq!(v, 5f64.ln(), max_relative = 1e-14);
        assert_eq!(
            log_normalizer(&[0.0], &LabelSet::empty()).unwrap_err(),
            Error::EmptyLabelSet
        );
    }

    #[test]
    fn normalizer_extreme_logits() {
        let l = LabelSet::new([0, 1, 2]);
        for s in [
            [-700.0, -700.0, -700.0],
            [700.0, 700.0, 700.0],
            [-50.0, 0.0, 50.0],
        ] {
            let v = log_normalizer(&s, &l).unwrap();
            assert!(v.is_finite());
            assert_relative_eq!(v, brute_log_normalizer(&s, &l), max_relative = 1e-12);
        }
    }

    #[test]
    fn score_examples() {
        let t = score_actor_subsets(&actor(0.7, vec![0.0, 4.2]), &LabelSet::new([1]), 20).unwrap();
        assert_eq!(t.entries.len(), 1);
        assert_relative_eq!(t.entries[0].score, 0.7, max_relative = 1e-15);

        let l = LabelSet::new([1, 2]);
        let t = score_actor_subsets(&actor(1.0, vec![5.0, 0.0, 0.0]), &l, 20).unwrap();
        for e in &t.entries {
            assert_relative_eq!(e.score, 1.0 / 3.0, max_relative = 1e-14);
        }

        let t = score_actor_subsets(&actor(1.0, vec![5.0, 2f64.ln(), 0.0]), &l, 20).unwrap();
        let get = |cls: &[usize]| {
            t.score_of(ActionSubset::from_classes(cls.iter().copied()))
                .unwrap()
        };
        assert_relative_eq!(get(&[1]), 0.4, max_relative = 1e-14);
        assert_relative_eq!(get(&[2]), 0.2, max_relative = 1e-14);
        assert_relative_eq!(get(&[1, 2]), 0.4, max_relative = 1e-14);
        assert_eq!(t.score_of(ActionSubset::EMPTY), None);
        assert_eq!(t.score_of(ActionSubset::from_classes([0])), None);
    }

    #[test]
    fn table_numerators_match_direct_sum() {
        let logits = vec![0.3, -1.7, 2.2, 0.9, -0.1];
        let l = LabelSet::new([0, 2, 3, 4]);
        let t = score_actor_subsets(&actor(0.9, logits.clone()), &l, 20).unwrap();
        for e in &t.entries {
            let num = subset_log_numerator(e.subset, &logits).unwrap();
            assert_eq!(e.log_score, num - t.log_normalizer + 0.9f64.ln());
        }
    }

    #[test]
    fn zero_confidence_gives_zero_scores() {
        let t =
            score_actor_subsets(&actor(0.0, vec![1.0, 2.0]), &LabelSet::new([0, 1]), 20).unwrap();
        assert!(t
            .entries
            .iter()
            .all(|e| e.score == 0.0 && e.log_score == f64::NEG_INFINITY));
    }

    fn logits_and_labels() -> impl Strategy<Value = (Vec<f64>, LabelSet, f64)> {
        (1usize..=10, 0usize..4).prop_flat_map(|(k, extra)| {
            (
                prop::collection::vec(-10.0f64..10.0, k + extra),
                prop::sample::subsequence((0..k + extra).collect::<Vec<_>>(), k),
                0.0f64..=1.0,
            )
                .prop_map(|(s, l, d)| (s, LabelSet::new(l), d))
        })
    }

    proptest! {
        #[test]
        fn scores_sum_to_confidence((s, l, d) in logits_and_labels()) {
            let t = score_actor_subsets(&actor(d, s), &l, 20).unwrap();
            prop_assert!((t.total() - d).abs() <= 1e-9);
        }

        #[test]
        fn closed_form_matches_brute_force((s, l, _d) in logits_and_labels()) {
            let fast = log_normalizer(&s, &l).unwrap();
            let slow = brute_log_normalizer(&s, &l);
            prop_assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(f64::MIN_POSITIVE), "{fast} vs {slow}");
        }

        #[test]
        fn raising_a_logit_moves_scores_the_right_way(
            (s, l, d) in logits_and_labels(),
            pick in 0usize..10,
            delta in 0.01f64..2.0,
        ) {
            prop_assume!(l.len() > 1);
            let d = d.max(0.05);
            let c = l.classes()[pick % l.len()];
            let before = score_actor_subsets(&actor(d, s.clone()), &l, 20).unwrap();
            let mut bumped = s;
            bumped[c] += delta;
            let after = score_actor_subsets(&actor(d, bumped), &l, 20).unwrap();
            for (b, a) in before.entries.iter().zip(&after.entries) {
                if b.subset.contains(c) {
                    prop_assert!(a.log_score > b.log_score);
                } else {
                    prop_assert!(a.log_score < b.log_score);
                }
            }
        }

        #[test]
        fn scoring_is_deterministic((s, l, d) in logits_and_labels()) {
            let a = score_actor_subsets(&actor(d, s.clone()), &l, 20).unwrap();
            let b = score_actor_subsets(&actor(d, s), &l, 20).unwrap();
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!(x.score.to_bits(), y.score.to_bits());
            }
        }
    }
}
