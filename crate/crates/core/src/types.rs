//! Domain types shared by every module.
//!
//! Classes are plain integer indices into a class table owned by the caller;
//! names only show up in file formats. All types are immutable values once
//! constructed and are `Send + Sync`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest class count supported by the fixed-width [`ActionSubset`].
pub const MAX_CLASSES: usize = 128;

/// Axis-aligned box given by its two corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.check("box")?;
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub(crate) fn check(&self, context: &str) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(context, "box", "non-finite box coordinate"));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::invalid(
                context,
                "box",
                "degenerate box (need x2 > x1 and y2 > y1)",
            ));
        }
        Ok(())
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// One detected person in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorDetection {
    pub actor_id: u64,
    pub frame_id: u64,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    pub confidence: f64,
    pub logits: Vec<f64>,
}

/// A set of distinct class indices, kept sorted ascending.
///
/// Position `j` in the sorted order is the label's *local* index, used for
/// coverage masks and power-set enumeration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct LabelSet(Vec<usize>);

impl LabelSet {
    pub fn new(classes: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = classes.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        LabelSet(v)
    }

    pub fn empty() -> Self {
        LabelSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    /// The whole label set as a subset.
    pub fn as_subset(&self) -> ActionSubset {
        ActionSubset::from_classes(self.0.iter().copied())
    }

    /// Maps a mask over local indices onto class bits.
    pub fn subset_from_local(&self, mask: u64) -> ActionSubset {
        let mut bits = 0u128;
        for (j, &c) in self.0.iter().enumerate() {
            if mask >> j & 1 == 1 {
                bits |= 1u128 << c;
            }
        }
        ActionSubset(bits)
    }

    /// Inverse of [`LabelSet::subset_from_local`]; `None` if `subset` leaves the label set.
    pub fn local_mask(&self, subset: ActionSubset) -> Option<u64> {
        if !subset.is_subset_of(self.as_subset()) {
            return None;
        }
        let mut mask = 0u64;
        for (j, &c) in self.0.iter().enumerate() {
            if subset.contains(c) {
                mask |= 1 << j;
            }
        }
        Some(mask)
    }
}

impl From<Vec<usize>> for LabelSet {
    fn from(v: Vec<usize>) -> Self {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<usize> {
    fn from(l: LabelSet) -> Self {
        l.0
    }
}

impl FromIterator<usize> for LabelSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        LabelSet::new(iter)
    }
}

/// Weak supervision for one clip: which actions occur, nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub labels: LabelSet,
    pub class_count: usize,
}

/// A subset of action classes as a fixed-width bit set (bit `c` = class `c`).
///
/// Ordering is by raw bit value, which is the tie-break order used by the solver.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ActionSubset(u128);

impl ActionSubset {
    pub const EMPTY: ActionSubset = ActionSubset(0);

    pub fn from_bits(bits: u128) -> Self {
        ActionSubset(bits)
    }

    /// Panics if a class index is `>= MAX_CLASSES`.
    pub fn from_classes(classes: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = 0u128;
        for c in classes {
            assert!(c < MAX_CLASSES, "class index {c} exceeds {MAX_CLASSES}");
            bits |= 1u128 << c;
        }
        ActionSubset(bits)
    }

    pub fn bits(self) -> u128 {
        self.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, class: usize) -> bool {
        class < MAX_CLASSES && self.0 >> class & 1 == 1
    }

    pub fn is_subset_of(self, other: ActionSubset) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: ActionSubset) -> ActionSubset {
        ActionSubset(self.0 | other.0)
    }

    /// Class indices in ascending order.
    pub fn classes(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..MAX_CLASSES).filter(move |&c| bits >> c & 1 == 1)
    }

    /// Largest class index plus one, or 0 for the empty set.
    pub fn span(self) -> usize {
        MAX_CLASSES - self.0.leading_zeros() as usize
    }
}

impl fmt::Debug for ActionSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.classes()).finish()
    }
}

impl TryFrom<Vec<usize>> for ActionSubset {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        if let Some(&c) = v.iter().find(|&&c| c >= MAX_CLASSES) {
            return Err(Error::invalid(
                "subset",
                "classes",
                format!("class index {c} exceeds {MAX_CLASSES}"),
            ));
        }
        Ok(ActionSubset::from_classes(v))
    }
}

impl From<ActionSubset> for Vec<usize> {
    fn from(s: ActionSubset) -> Self {
        s.classes().collect()
    }
}

/// Outcome of associating action subsets with the actors of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(actor_id, subset)` in input actor order.
    pub assignments: Vec<(u64, ActionSubset)>,
    pub objective: f64,
    pub feasible: bool,
}

impl AssignmentResult {
    pub fn infeasible() -> Self {
        AssignmentResult {
            assignments: Vec::new(),
            objective: 0.0,
            feasible: false,
        }
    }

    pub fn subsets(&self) -> Vec<ActionSubset> {
        self.assignments.iter().map(|&(_, s)| s).collect()
    }

    /// Checks the structural constraints: one non-empty subset of `labels` per
    /// actor, and every label covered by at least one actor.
    pub fn satisfies_constraints(&self, labels: &LabelSet, actor_count: usize) -> bool {
        if labels.is_empty() {
            return self.assignments.is_empty();
        }
        if self.assignments.len() != actor_count {
            return false;
        }
        let allowed = labels.as_subset();
        let mut covered = ActionSubset::EMPTY;
        for &(_, s) in &self.assignments {
            if s.is_empty() || !s.is_subset_of(allowed) {
                return false;
            }
            covered = covered.union(s);
        }
        covered == allowed
    }
}

/// The detections of one annotated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: u64,
    pub actors: Vec<ActorDetection>,
}

/// A clip: weak annotation plus its annotated frames, each associated independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub annotation: ClipAnnotation,
    pub frames: Vec<Frame>,
}

impl Clip {
    pub fn validate(&self) -> Result<()> {
        for f in &self.frames {
            validate_clip(&f.actors, &self.annotation)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub frame_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub frame_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Checks one frame's detections against the clip annotation.
///
/// Pure: the inputs are returned untouched on success.
pub fn validate_clip<'a>(
    actors: &'a [ActorDetection],
    ann: &ClipAnnotation,
) -> Result<&'a [ActorDetection]> {
    let c = ann.class_count;
    let clip_ctx = format!("clip `{}`", ann.clip_id);
    if c == 0 || c > MAX_CLASSES {
        return Err(Error::invalid(
            clip_ctx,
            "class_count",
            format!("class count {c} outside [1, {MAX_CLASSES}]"),
        ));
    }
    if let Some(&bad) = ann.labels.classes().iter().find(|&&l| l >= c) {
        return Err(Error::invalid(
            clip_ctx,
            "labels",
            format!("label index out of range: {bad} >= {c}"),
        ));
    }
    for a in actors {
        let ctx = format!(
            "clip `{}`, frame {}, actor {}",
            ann.clip_id, a.frame_id, a.actor_id
        );
        if !a.confidence.is_finite() {
            return Err(Error::invalid(ctx, "confidence", "non-finite confidence"));
        }
        if !(0.0..=1.0).contains(&a.confidence) {
            return Err(Error::invalid(
                ctx,
                "confidence",
                format!("confidence out of range: {}", a.confidence),
            ));
        }
        if a.logits.len() != c {
            return Err(Error::invalid(
                ctx,
                "logits",
                format!(
                    "logits length {} does not match class count {c}",
                    a.logits.len()
                ),
            ));
        }
        if a.logits.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid(ctx, "logits", "non-finite logit"));
        }
        if let Some(b) = &a.bbox {
            b.check(&ctx)?;
        }
    }
    Ok(actors)
}
