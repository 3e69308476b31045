//! Exact actor-to-subset assignment under the coverage constraint.
//!
//! The binary program picks one non-empty `ω_i ⊆ L` per actor, maximises
//! `Σ_i p(ω_i, i)`, and requires `L ⊆ ∪_i ω_i`. The objective is separable per
//! actor and the only coupling is coverage, so a dynamic program over the set of
//! labels covered so far solves it exactly.
//!
//! Transitions are enumerated as `(covered, newly covered)` pairs of disjoint
//! masks, `3^|L|` per actor. For each pair the best subset that adds exactly the
//! newly covered labels is precomputed per actor, also in `3^|L|`.
//!
//! Ties are broken towards the lexicographically smallest sequence of subset
//! bit values in actor order.

use crate::error::{Error, Result};
use crate::powerset::{score_actor_subsets, SubsetScoreTable};
use crate::types::{ActionSubset, ActorDetection, AssignmentResult, LabelSet};

pub const DEFAULT_SOLVER_CAP: usize = 14;

/// Hard ceiling for any configured solver cap (`3^16` pair tables).
pub const MAX_SOLVER_CAP: usize = 16;

/// Largest search space the brute-force oracle accepts.
pub const BRUTE_FORCE_BOUND: f64 = 1e7;

/// Covered-label mask over local label indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoverageState(pub u64);

impl CoverageState {
    pub fn covers(self, full: u64) -> bool {
        self.0 & full == full
    }
}

const NONE: u64 = u64::MAX;

#[derive(Clone, Copy)]
struct Best {
    value: f64,
    mask: u64,
}

impl Best {
    const EMPTY: Best = Best {
        value: f64::NEG_INFINITY,
        mask: NONE,
    };

    #[inline]
    fn better_than(self, other: Best) -> bool {
        self.value > other.value || (self.value == other.value && self.mask < other.mask)
    }
}

fn check_tables(tables: &[SubsetScoreTable], labels: &LabelSet, cap: usize) -> Result<usize> {
    let k = labels.len();
    let cap = cap.min(MAX_SOLVER_CAP);
    if k > cap {
        return Err(Error::SolverCapExceeded { size: k, cap });
    }
    let expected = (1usize << k) - 1;
    for t in tables {
        if &t.labels != labels || t.entries.len() != expected {
            return Err(Error::TableMismatch);
        }
    }
    Ok(k)
}

fn result_from_masks(
    tables: &[SubsetScoreTable],
    labels: &LabelSet,
    masks: &[u64],
    objective: f64,
) -> AssignmentResult {
    AssignmentResult {
        assignments: tables
            .iter()
            .zip(masks)
            .map(|(t, &m)| (t.actor_id, labels.subset_from_local(m)))
            .collect(),
        objective,
        feasible: true,
    }
}

/// Solves the assignment exactly.
///
/// `L = ∅` yields an empty feasible assignment with objective 0; no actors with
/// `L ≠ ∅` yields an infeasible result.
pub fn solve_assignment(
    tables: &[SubsetScoreTable],
    labels: &LabelSet,
    cap: usize,
) -> Result<AssignmentResult> {
    if labels.is_empty() {
        return Ok(AssignmentResult {
            assignments: Vec::new(),
            objective: 0.0,
            feasible: true,
        });
    }
    let k = check_tables(tables, labels, cap)?;
    if tables.is_empty() {
        return Ok(AssignmentResult::infeasible());
    }

    let size = 1usize << k;
    let full = (size - 1) as u64;

    // tern[m] = Σ_{j∈m} 3^j; a disjoint pair (new, covered) lives at tern[covered] + 2·tern[new].
    let mut tern = vec![0usize; size];
    for m in 1..size {
        let low = m.trailing_zeros();
        tern[m] = tern[m & (m - 1)] + 3usize.pow(low);
    }
    let mut pair_best = vec![Best::EMPTY; 3usize.pow(k as u32)];

    let mut value = vec![f64::NEG_INFINITY; size];
    let mut rank = vec![u32::MAX; size];
    value[0] = 0.0;
    rank[0] = 0;

    let mut parents: Vec<Vec<(u64, u64)>> = Vec::with_capacity(tables.len());
    let mut next_value = vec![f64::NEG_INFINITY; size];
    let mut next_key = vec![(u32::MAX, NONE); size];
    let mut order: Vec<usize> = Vec::with_capacity(size);

    for table in tables {
        // pair_best[(new, covered)] = best ω with ω ∖ covered = new, ω ≠ ∅.
        for covered in 0..size {
            let comp = full as usize & !covered;
            let mut new = comp;
            loop {
                let idx = tern[covered] + 2 * tern[new];
                pair_best[idx] = if covered == 0 {
                    if new == 0 {
                        Best::EMPTY
                    } else {
                        Best {
                            value: table.score_by_mask(new as u64),
                            mask: new as u64,
                        }
                    }
                } else {
                    let b = covered & covered.wrapping_neg();
                    let rest = covered & !b;
                    let without = pair_best[tern[rest] + 2 * tern[new]];
                    let with = pair_best[tern[rest] + 2 * tern[new | b]];
                    if with.better_than(without) {
                        with
                    } else {
                        without
                    }
                };
                if new == 0 {
                    break;
                }
                new = (new - 1) & comp;
            }
        }

        next_value.fill(f64::NEG_INFINITY);
        next_key.fill((u32::MAX, NONE));
        let mut parent = vec![(NONE, NONE); size];
        for covered in 0..size {
            let base = value[covered];
            if base == f64::NEG_INFINITY {
                continue;
            }
            let comp = full as usize & !covered;
            let mut new = comp;
            loop {
                let best = pair_best[tern[covered] + 2 * tern[new]];
                if best.mask != NONE {
                    let target = covered | new;
                    let cand = base + best.value;
                    let key = (rank[covered], best.mask);
                    if cand > next_value[target]
                        || (cand == next_value[target] && key < next_key[target])
                    {
                        next_value[target] = cand;
                        next_key[target] = key;
                        parent[target] = (covered as u64, best.mask);
                    }
                }
                if new == 0 {
                    break;
                }
                new = (new - 1) & comp;
            }
        }

        order.clear();
        order.extend((0..size).filter(|&m| next_value[m] != f64::NEG_INFINITY));
        order.sort_unstable_by_key(|&m| next_key[m]);
        rank.fill(u32::MAX);
        for (r, &m) in order.iter().enumerate() {
            rank[m] = r as u32;
        }
        std::mem::swap(&mut value, &mut next_value);
        parents.push(parent);
    }

    let objective = value[full as usize];
    debug_assert!(objective.is_finite());
    let mut masks = vec![0u64; tables.len()];
    let mut state = full;
    for (i, parent) in parents.iter().enumerate().rev() {
        let (prev, choice) = parent[state as usize];
        masks[i] = choice;
        state = prev;
    }
    debug_assert_eq!(state, 0);
    Ok(result_from_masks(tables, labels, &masks, objective))
}

/// Exhaustive oracle for [`solve_assignment`]; same objective summation order
/// and tie-break.
pub fn brute_force_assignment(
    tables: &[SubsetScoreTable],
    labels: &LabelSet,
) -> Result<AssignmentResult> {
    if labels.is_empty() {
        return Ok(AssignmentResult {
            assignments: Vec::new(),
            objective: 0.0,
            feasible: true,
        });
    }
    let k = check_tables(tables, labels, 63)?;
    if tables.is_empty() {
        return Ok(AssignmentResult::infeasible());
    }
    let choices = (1u64 << k) - 1;
    let space = (choices as f64).powi(tables.len() as i32);
    if space > BRUTE_FORCE_BOUND {
        return Err(Error::SearchSpaceTooLarge {
            size: space,
            bound: BRUTE_FORCE_BOUND,
        });
    }
    let full = choices;
    let n = tables.len();
    // odometer over local masks, first actor most significant
    let mut cur = vec![1u64; n];
    let mut best: Option<(f64, Vec<u64>)> = None;
    loop {
        let mut total = 0.0;
        let mut covered = 0u64;
        for (t, &m) in tables.iter().zip(&cur) {
            total += t.score_by_mask(m);
            covered |= m;
        }
        if covered == full && best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, cur.clone()));
        }
        let mut i = n;
        loop {
            if i == 0 {
                let (objective, masks) = best.expect("one actor can take all labels");
                return Ok(result_from_masks(tables, labels, &masks, objective));
            }
            i -= 1;
            if cur[i] < choices {
                cur[i] += 1;
                break;
            }
            cur[i] = 1;
        }
    }
}

/// The thresholding baseline: each actor independently takes the labels
/// whose logit is strictly positive (probability strictly above 0.5).
///
/// No coverage or non-emptiness is enforced.
pub fn assign_without_lp<S: AsRef<[f64]>>(
    logits: &[S],
    labels: &LabelSet,
) -> Result<Vec<ActionSubset>> {
    logits
        .iter()
        .map(|s| {
            let s = s.as_ref();
            let mut out = ActionSubset::EMPTY;
            for &c in labels.classes() {
                let v = *s.get(c).ok_or_else(|| {
                    Error::Shape(format!("label {c} has no logit ({} given)", s.len()))
                })?;
                if v > 0.0 {
                    out = out.union(ActionSubset::from_classes([c]));
                }
            }
            Ok(out)
        })
        .collect()
}

/// Scores every actor and solves the frame.
pub fn associate_frame(
    actors: &[ActorDetection],
    labels: &LabelSet,
    powerset_cap: usize,
    solver_cap: usize,
) -> Result<AssignmentResult> {
    if labels.is_empty() {
        return solve_assignment(&[], labels, solver_cap);
    }
    if labels.len() > solver_cap.min(MAX_SOLVER_CAP) {
        return Err(Error::SolverCapExceeded {
            size: labels.len(),
            cap: solver_cap.min(MAX_SOLVER_CAP),
        });
    }
    let tables = actors
        .iter()
        .map(|a| score_actor_subsets(a, labels, powerset_cap))
        .collect::<Result<Vec<_>>>()?;
    solve_assignment(&tables, labels, solver_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerset::DEFAULT_POWERSET_CAP;
    use proptest::prelude::*;

    fn actor(id: u64, d: f64, logits: Vec<f64>) -> ActorDetection {
        ActorDetection {
            actor_id: id,
            frame_id: 0,
            bbox: None,
            confidence: d,
            logits,
        }
    }

    fn tables(actors: &[ActorDetection], labels: &LabelSet) -> Vec<SubsetScoreTable> {
        actors
            .iter()
            .map(|a| score_actor_subsets(a, labels, DEFAULT_POWERSET_CAP).unwrap())
            .collect()
    }

    fn set(c: &[usize]) -> ActionSubset {
        ActionSubset::from_classes(c.iter().copied())
    }

    #[test]
    fn single_actor_takes_everything() {
        let l = LabelSet::new([1, 2]);
        let t = tables(&[actor(4, 0.8, vec![0.0, 3.0, -3.0])], &l);
        let r = solve_assignment(&t, &l, DEFAULT_SOLVER_CAP).unwrap();
        assert!(r.feasible);
        assert_eq!(r.assignments, vec![(4, set(&[1, 2]))]);
        assert_eq!(r.objective, t[0].score_of(set(&[1, 2])).unwrap());
    }

    #[test]
    fn single_label_goes_to_everyone() {
        let l = LabelSet::new([1]);
        let t = tables(
            &[
                actor(0, 0.3, vec![0.0, -5.0]),
                actor(1, 0.9, vec![0.0, 5.0]),
            ],
            &l,
        );
        let r = solve_assignment(&t, &l, DEFAULT_SOLVER_CAP).unwrap();
        assert_eq!(r.subsets(), vec![set(&[1]), set(&[1])]);
        assert!((r.objective - 1.2).abs() < 1e-15);
    }

    #[test]
    fn two_actors_split_labels() {
        // oracle: enumerate all 9 assignments by hand
        let l = LabelSet::new([1, 2]);
        let a = [
            actor(0, 1.0, vec![0.0, 2.0, -2.0]),
            actor(1, 1.0, vec![0.0, -2.0, 2.0]),
        ];
        let t = tables(&a, &l);
        let e2 = 2f64.exp();
        let z = e2 + (-2f64).exp() + 1.0;
        let p_hi = e2 / z;
        let p_lo = (-2f64).exp() / z;
        let p_both = 1.0 / z;
        let per_actor = [[p_hi, p_lo, p_both], [p_lo, p_hi, p_both]];
        let masks = [0b01u64, 0b10, 0b11];
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for (i, &m1) in masks.iter().enumerate() {
            for (j, &m2) in masks.iter().enumerate() {
                if m1 | m2 == 0b11 {
                    let v = per_actor[0][i] + per_actor[1][j];
                    if v > best.0 {
                        best = (v, (i, j));
                    }
                }
            }
        }
        assert_eq!(best.1, (0, 1));
        let r = solve_assignment(&t, &l, DEFAULT_SOLVER_CAP).unwrap();
        assert_eq!(r.subsets(), vec![set(&[1]), set(&[2])]);
        assert!((r.objective - best.0).abs() < 1e-15);
        assert!((r.objective - 1.7336).abs() < 1e-4);
    }

    #[test]
    fn symmetric_tie_breaks_lexicographically() {
        let l = LabelSet::new([1, 2]);
        let a = [actor(0, 1.0, vec![0.0; 3]), actor(1, 1.0, vec![0.0; 3])];
        let t = tables(&a, &l);
        let r = solve_assignment(&t, &l, DEFAULT_SOLVER_CAP).unwrap();
        let b = brute_force_assignment(&t, &l).unwrap();
        assert_eq!(r, b);
        assert_eq!(r.subsets(), vec![set(&[1]), set(&[2])]);
        assert!((r.objective - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_frames() {
        let l = LabelSet::new([0]);
        let r = solve_assignment(&[], &l, DEFAULT_SOLVER_CAP).unwrap();
        assert!(!r.feasible);
        assert!(!brute_force_assignment(&[], &l).unwrap().feasible);

        let r = solve_assignment(&[], &LabelSet::empty(), DEFAULT_SOLVER_CAP).unwrap();
        assert!(r.feasible && r.assignments.is_empty() && r.objective == 0.0);
        let r = associate_frame(&[actor(0, 1.0, vec![0.0])], &LabelSet::empty(), 20, 14).unwrap();
        assert!(r.feasible && r.assignments.is_empty());
    }

    #[test]
    fn caps_and_mismatches() {
        let l = LabelSet::new(0..15);
        let a = actor(0, 1.0, vec![0.0; 15]);
        let t = tables(std::slice::from_ref(&a), &l);
        assert_eq!(
            solve_assignment(&t, &l, DEFAULT_SOLVER_CAP).unwrap_err(),
            Error::SolverCapExceeded { size: 15, cap: 14 }
        );
        assert!(associate_frame(&[a], &l, 20, 14).is_err());

        let l2 = LabelSet::new([0, 1]);
        let t2 = tables(&[actor(0, 1.0, vec![0.0; 3])], &LabelSet::new([0, 2]));
        assert_eq!(
            solve_assignment(&t2, &l2, 14).unwrap_err(),
            Error::TableMismatch
        );

        let big = LabelSet::new(0..8);
        let many: Vec<_> = (0..4).map(|i| actor(i, 1.0, vec![0.0; 8])).collect();
        assert!(matches!(
            brute_force_assignment(&tables(&many, &big), &big),
            Err(Error::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn every_actor_gets_a_subset_and_labels_are_covered() {
        // L = {1,2,3}, four actors. One subset per actor is structural, and a
        // union missing label 1 is rejected by the checker.
        let l = LabelSet::new([1, 2, 3]);
        let missing_one = AssignmentResult {
            assignments: vec![
                (0, set(&[2])),
                (1, set(&[2, 3])),
                (2, set(&[3])),
                (3, set(&[2])),
            ],
            objective: 0.0,
            feasible: true,
        };
        assert!(!missing_one.satisfies_constraints(&l, 4));
        let two_for_a1 = AssignmentResult {
            assignments: vec![
                (0, set(&[1])),
                (0, set(&[2])),
                (1, set(&[3])),
                (2, set(&[3])),
                (3, set(&[2])),
            ],
            ..missing_one.clone()
        };
        assert!(!two_for_a1.satisfies_constraints(&l, 4));

        let a: Vec<_> = (0..4)
            .map(|i| actor(i, 0.9, vec![0.0, -3.0 + i as f64, 0.5, 1.0]))
            .collect();
        let r = solve_assignment(&tables(&a, &l), &l, DEFAULT_SOLVER_CAP).unwrap();
        assert!(r.satisfies_constraints(&l, 4));
    }

    #[test]
    fn threshold_baseline() {
        let l = LabelSet::new([0, 1]);
        assert_eq!(
            assign_without_lp(&[vec![1.2, -0.3]], &l).unwrap(),
            vec![set(&[0])]
        );
        assert_eq!(
            assign_without_lp(&[vec![-1.0, -0.3]], &l).unwrap(),
            vec![ActionSubset::EMPTY]
        );
        assert_eq!(
            assign_without_lp(&[vec![0.0, 2.0]], &l).unwrap(),
            vec![set(&[1])]
        );
        // labels outside L are never assigned
        assert_eq!(
            assign_without_lp(&[vec![5.0, 5.0, 5.0]], &LabelSet::new([2])).unwrap(),
            vec![set(&[2])]
        );
        assert!(assign_without_lp(&[vec![1.0]], &l).is_err());
    }

    fn instance(
        max_n: usize,
        max_k: usize,
    ) -> impl Strategy<Value = (Vec<ActorDetection>, LabelSet)> {
        (1..=max_n, 1..=max_k).prop_flat_map(|(n, k)| {
            (
                prop::collection::vec((prop::collection::vec(-4.0f64..4.0, k), 0.0f64..=1.0), n),
                Just(k),
            )
                .prop_map(|(rows, k)| {
                    let actors = rows
                        .into_iter()
                        .enumerate()
                        .map(|(i, (s, d))| actor(i as u64, d, s))
                        .collect();
                    (actors, LabelSet::new(0..k))
                })
        })
    }

    proptest! {
        #[test]
        fn dp_matches_oracle((actors, l) in instance(4, 4)) {
            let t = tables(&actors, &l);
            let dp = solve_assignment(&t, &l, DEFAULT_SOLVER_CAP).unwrap();
            let bf = brute_force_assignment(&t, &l).unwrap();
            prop_assert!(dp.satisfies_constraints(&l, actors.len()));
            prop_assert_eq!(dp.objective.to_bits(), bf.objective.to_bits());
            prop_assert_eq!(dp.assignments, bf.assignments);
        }

        #[test]
        fn adding_an_actor_never_hurts((actors, l) in instance(4, 5)) {
            let t = tables(&actors, &l);
            let all = solve_assignment(&t, &l, DEFAULT_SOLVER_CAP).unwrap();
            let fewer = solve_assignment(&t[..t.len() - 1], &l, DEFAULT_SOLVER_CAP).unwrap();
            if fewer.feasible {
                prop_assert!(all.objective >= fewer.objective);
            }
        }

        #[test]
        fn confidence_scaling((actors, l) in instance(4, 4), lambda in 0.1f64..1.0) {
            let actors: Vec<_> = actors.into_iter().map(|mut a| { a.confidence = a.confidence.max(0.1); a }).collect();
            let scaled: Vec<_> = actors.iter().cloned().map(|mut a| { a.confidence *= lambda; a }).collect();
            let base = solve_assignment(&tables(&actors, &l), &l, 14).unwrap();
            let after = solve_assignment(&tables(&scaled, &l), &l, 14).unwrap();
            prop_assert!((after.objective - lambda * base.objective).abs() <= 1e-12 * base.objective.max(1.0));
            // the argmax survives up to rounding-level near-ties
            if base.assignments != after.assignments {
                let t = tables(&actors, &l);
                let v: f64 = after.assignments.iter().zip(&t).map(|(&(_, s), t)| t.score_of(s).unwrap()).sum();
                prop_assert!((v - base.objective).abs() <= 1e-12);
            }
        }
    }
}
