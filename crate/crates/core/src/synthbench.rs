//! Synthetic weakly supervised benchmark with planted per-actor ground truth,
//! and a linear toy model trained with the MIML warmup then association
//! schedule.
//!
//! The generator keeps the hidden per-actor labels in [`FrameTruth`], separate
//! from the [`WeakFrame`]s the weak trainers consume. The weak training paths
//! only ever receive `&[WeakFrame]`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmap::{mean_average_precision, DEFAULT_IOU_THRESHOLD};
use crate::losses::{
    association_gradient, association_loss, combined_loss, sigmoid, sigmoid_matrix,
};
use crate::powerset::DEFAULT_POWERSET_CAP;
use crate::solver::{assign_without_lp, associate_frame, DEFAULT_SOLVER_CAP};
use crate::types::{
    ActionSubset, ActorDetection, BoundingBox, GroundTruthRecord, LabelSet, PredictionRecord,
    MAX_CLASSES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    pub max_labels_per_actor: usize,
    /// Probability that an actor performs more than one action.
    pub multi_label_rate: f64,
    pub feature_dim: usize,
    /// Norm of each class prototype in feature space.
    pub separation: f64,
    /// Standard deviation of the per-dimension feature noise.
    pub feature_noise: f64,
    /// Probability that a frame contains an interacting pair, where a second
    /// actor performs the partner action of the first.
    pub interaction_rate: f64,
    /// The first `paired_classes` classes form partner pairs `(0, 1)`, `(2, 3)`, ...
    /// Interactions draw from these pairs only.
    pub paired_classes: usize,
    /// Relative weight of paired classes when an actor's labels are drawn
    /// outside an interaction.
    pub solo_pair_weight: f64,
    /// Probability that one label is dropped from a clip's weak label set.
    pub label_noise: f64,
    /// Box jitter, as a fraction of the box size.
    pub box_jitter: f64,
    /// Probability of one extra false-positive detection per frame.
    pub false_positive_rate: f64,
    pub true_confidence: (f64, f64),
    pub false_confidence: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 10,
            train_clips: 800,
            val_clips: 200,
            min_actors: 2,
            max_actors: 4,
            max_labels_per_actor: 3,
            multi_label_rate: 0.35,
            feature_dim: 16,
            separation: 1.5,
            feature_noise: 0.5,
            interaction_rate: 1.0,
            paired_classes: 6,
            solo_pair_weight: 0.05,
            label_noise: 0.0,
            box_jitter: 0.05,
            false_positive_rate: 0.1,
            true_confidence: (0.6, 1.0),
            false_confidence: (0.05, 0.5),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return bad("num_classes must be in [2, 128]");
        }
        if self.train_clips == 0 || self.val_clips == 0 {
            return bad("train_clips and val_clips must be positive");
        }
        if self.min_actors == 0 || self.max_actors < self.min_actors {
            return bad("need 1 <= min_actors <= max_actors");
        }
        if self.max_labels_per_actor == 0 || self.max_labels_per_actor > self.num_classes {
            return bad("max_labels_per_actor must be in [1, num_classes]");
        }
        if self.max_actors * self.max_labels_per_actor > 64 {
            return bad("max_actors * max_labels_per_actor too large");
        }
        if !self.paired_classes.is_multiple_of(2) || self.paired_classes > self.num_classes {
            return bad("paired_classes must be even and at most num_classes");
        }
        if self.paired_classes == self.num_classes && self.solo_pair_weight == 0.0 {
            return bad("solo_pair_weight must be positive when every class is paired");
        }
        if !(self.solo_pair_weight.is_finite() && self.solo_pair_weight >= 0.0) {
            return bad("solo_pair_weight must be finite and >= 0");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        for (name, v) in [
            ("multi_label_rate", self.multi_label_rate),
            ("interaction_rate", self.interaction_rate),
            ("label_noise", self.label_noise),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("true_confidence", self.true_confidence),
            ("false_confidence", self.false_confidence),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!(
                    "{name} must be a range inside [0, 1]"
                )));
            }
        }
        if !(self.separation.is_finite() && self.separation >= 0.0)
            || !(self.feature_noise.is_finite() && self.feature_noise >= 0.0)
            || !(self.box_jitter.is_finite() && self.box_jitter >= 0.0)
        {
            return bad("separation, feature_noise and box_jitter must be finite and >= 0");
        }
        Ok(())
    }
}

/// One detection as the trainer sees it: geometry, confidence and features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDetection {
    pub actor_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub features: Vec<f64>,
}

/// A frame with only weak supervision: the clip label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakFrame {
    pub clip_id: String,
    pub frame_id: u64,
    pub labels: LabelSet,
    pub detections: Vec<SyntheticDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthActor {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub labels: ActionSubset,
}

/// Hidden planted truth for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub actors: Vec<GroundTruthActor>,
    /// For each detection, the ground-truth actor it came from (`None` = false positive).
    pub detection_source: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub frames: Vec<WeakFrame>,
    pub truth: Vec<FrameTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub train: Split,
    pub val: Split,
}

impl SyntheticDataset {
    pub fn class_count(&self) -> usize {
        self.config.num_classes
    }
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    rng: ChaCha8Rng,
    prototypes: Vec<Vec<f64>>,
    solo_weights: WeightedIndex<f64>,
    /// Over pairs; `None` when no classes are paired.
    pair_weights: Option<WeightedIndex<f64>>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..cfg.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.feature_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm * cfg.separation).collect()
            })
            .collect();
        // long-tailed class frequencies
        let weights: Vec<f64> = (0..cfg.num_classes)
            .map(|c| 1.0 / (1.0 + c as f64).powf(0.7))
            .collect();
        let solo: Vec<f64> = weights
            .iter()
            .enumerate()
            .map(|(c, w)| {
                if c < cfg.paired_classes {
                    w * cfg.solo_pair_weight
                } else {
                    *w
                }
            })
            .collect();
        let pairs: Vec<f64> = weights[..cfg.paired_classes]
            .iter()
            .step_by(2)
            .copied()
            .collect();
        Generator {
            cfg,
            rng,
            prototypes,
            solo_weights: WeightedIndex::new(solo).expect("validated solo weights"),
            pair_weights: (!pairs.is_empty())
                .then(|| WeightedIndex::new(pairs).expect("positive weights")),
        }
    }

    fn draw_labels(&mut self, seed_class: Option<usize>) -> ActionSubset {
        let max = self.cfg.max_labels_per_actor;
        let k = if max > 1 && self.rng.random_bool(self.cfg.multi_label_rate) {
            self.rng.random_range(2..=max)
        } else {
            1
        };
        let mut s = seed_class.map_or(ActionSubset::EMPTY, |c| ActionSubset::from_classes([c]));
        let mut guard = 0;
        while s.len() < k && guard < 64 {
            let c = self.solo_weights.sample(&mut self.rng);
            s = s.union(ActionSubset::from_classes([c]));
            guard += 1;
        }
        s
    }

    fn features(&mut self, labels: ActionSubset) -> Vec<f64> {
        let noise = Normal::new(0.0, self.cfg.feature_noise.max(0.0)).expect("finite sigma");
        (0..self.cfg.feature_dim)
            .map(|j| {
                let signal: f64 = labels.classes().map(|c| self.prototypes[c][j]).sum();
                signal + noise.sample(&mut self.rng)
            })
            .collect()
    }

    fn random_box(&mut self) -> BoundingBox {
        let w = self.rng.random_range(0.08..0.25);
        let h = self.rng.random_range(0.25..0.6);
        let x = self.rng.random_range(0.0..1.0 - w);
        let y = self.rng.random_range(0.0..1.0 - h);
        BoundingBox::new(x, y, x + w, y + h).expect("valid box")
    }

    fn jitter(&mut self, b: &BoundingBox) -> BoundingBox {
        let sigma = self.cfg.box_jitter;
        if sigma == 0.0 {
            return *b;
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        let (w, h) = (b.width(), b.height());
        let mut x1 = (b.x1 + n.sample(&mut self.rng) * w).clamp(0.0, 1.0);
        let mut y1 = (b.y1 + n.sample(&mut self.rng) * h).clamp(0.0, 1.0);
        let mut x2 = (b.x2 + n.sample(&mut self.rng) * w).clamp(0.0, 1.0);
        let mut y2 = (b.y2 + n.sample(&mut self.rng) * h).clamp(0.0, 1.0);
        if x2 - x1 < 0.01 {
            x1 = b.x1;
            x2 = b.x2;
        }
        if y2 - y1 < 0.01 {
            y1 = b.y1;
            y2 = b.y2;
        }
        BoundingBox::new(x1, y1, x2, y2).expect("valid box")
    }

    fn frame(&mut self, clip_index: usize, frame_id: u64, prefix: &str) -> (WeakFrame, FrameTruth) {
        let cfg = self.cfg;
        let n = self.rng.random_range(cfg.min_actors..=cfg.max_actors);
        let mut labels: Vec<ActionSubset> = (0..n).map(|_| self.draw_labels(None)).collect();
        if n >= 2 && self.pair_weights.is_some() && self.rng.random_bool(cfg.interaction_rate) {
            let pair = self
                .pair_weights
                .as_ref()
                .expect("checked")
                .sample(&mut self.rng);
            let (a, b) = (2 * pair, 2 * pair + 1);
            let i = self.rng.random_range(0..n);
            let mut j = self.rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            labels[i] = self.draw_labels(Some(a));
            labels[j] = self.draw_labels(Some(b));
        }

        let mut truth = Vec::with_capacity(n);
        let mut detections = Vec::with_capacity(n + 1);
        let mut source = Vec::with_capacity(n + 1);
        for (i, &l) in labels.iter().enumerate() {
            let gt_box = self.random_box();
            let det_box = self.jitter(&gt_box);
            let (lo, hi) = cfg.true_confidence;
            let confidence = if hi > lo {
                self.rng.random_range(lo..=hi)
            } else {
                lo
            };
            let features = self.features(l);
            truth.push(GroundTruthActor {
                bbox: gt_box,
                labels: l,
            });
            detections.push(SyntheticDetection {
                actor_id: i as u64,
                bbox: det_box,
                confidence,
                features,
            });
            source.push(Some(i));
        }
        if self.rng.random_bool(cfg.false_positive_rate) {
            let bbox = self.random_box();
            let (lo, hi) = cfg.false_confidence;
            let confidence = if hi > lo {
                self.rng.random_range(lo..=hi)
            } else {
                lo
            };
            let features = self.features(ActionSubset::EMPTY);
            detections.push(SyntheticDetection {
                actor_id: n as u64,
                bbox,
                confidence,
                features,
            });
            source.push(None);
        }

        let union = labels
            .iter()
            .fold(ActionSubset::EMPTY, |acc, &s| acc.union(s));
        let mut weak: Vec<usize> = union.classes().collect();
        if weak.len() > 1 && self.rng.random_bool(cfg.label_noise) {
            let drop = self.rng.random_range(0..weak.len());
            weak.remove(drop);
        }
        (
            WeakFrame {
                clip_id: format!("{prefix}{clip_index:05}"),
                frame_id,
                labels: LabelSet::new(weak),
                detections,
            },
            FrameTruth {
                actors: truth,
                detection_source: source,
            },
        )
    }

    fn split(&mut self, clips: usize, prefix: &str, first_frame: u64) -> Split {
        let (frames, truth) = (0..clips)
            .map(|i| self.frame(i, first_frame + i as u64, prefix))
            .unzip();
        Split { frames, truth }
    }
}

/// Generates train and validation splits; identical configs give identical data.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut g = Generator::new(cfg);
    let train = g.split(cfg.train_clips, "train-", 0);
    let val = g.split(cfg.val_clips, "val-", cfg.train_clips as u64);
    Ok(SyntheticDataset {
        config: cfg.clone(),
        train,
        val,
    })
}

/// Per-class linear logit model with SGD momentum state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    #[serde(skip)]
    velocity_w: Option<Array2<f64>>,
    #[serde(skip)]
    velocity_b: Option<Array1<f64>>,
}

impl ToyModel {
    pub fn new(feature_dim: usize, class_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = Normal::new(0.0, 0.01).expect("finite sigma");
        ToyModel {
            weights: Array2::from_shape_fn((feature_dim, class_count), |_| n.sample(&mut rng)),
            bias: Array1::zeros(class_count),
            velocity_w: None,
            velocity_b: None,
        }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    fn features(detections: &[SyntheticDetection]) -> Array2<f64> {
        let f = detections.first().map_or(0, |d| d.features.len());
        Array2::from_shape_fn((detections.len(), f), |(i, j)| detections[i].features[j])
    }

    /// Logits for every detection, shape `n × C`.
    pub fn logits(&self, detections: &[SyntheticDetection]) -> Array2<f64> {
        if detections.is_empty() {
            return Array2::zeros((0, self.class_count()));
        }
        Self::features(detections).dot(&self.weights) + &self.bias
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }

    fn step(&mut self, grad_w: &Array2<f64>, grad_b: &Array1<f64>, sched: &Schedule, lr: f64) {
        let vw = self
            .velocity_w
            .get_or_insert_with(|| Array2::zeros(self.weights.dim()));
        let vb = self
            .velocity_b
            .get_or_insert_with(|| Array1::zeros(self.bias.len()));
        let decayed = grad_w + &(&self.weights * sched.weight_decay);
        *vw = &*vw * sched.momentum + &decayed;
        *vb = &*vb * sched.momentum + grad_b;
        self.weights.scaled_add(-lr, vw);
        self.bias.scaled_add(-lr, vb);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// MIML loss only, for every epoch.
    Miml,
    /// MIML warmup, then MIML plus association from the exact solver.
    Proposed,
    /// MIML warmup, then MIML plus association from per-class thresholding.
    NoLp,
    /// Per-actor BCE against the hidden labels (upper bound).
    Supervised,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Miml,
        Method::Proposed,
        Method::NoLp,
        Method::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Miml => "miml",
            Method::Proposed => "proposed",
            Method::NoLp => "no-lp",
            Method::Supervised => "supervised",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Total training epochs, warmup included.
    pub epochs: usize,
    /// Leading epochs trained with the MIML loss only.
    pub warmup_epochs: usize,
    /// Assignments are recomputed every `refresh_every` epochs after warmup.
    pub refresh_every: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by `lr_decay` every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub powerset_cap: usize,
    pub solver_cap: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 60,
            warmup_epochs: 10,
            refresh_every: 1,
            alpha: crate::losses::DEFAULT_ALPHA,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.5,
            decay_every: 25,
            batch_size: 16,
            powerset_cap: DEFAULT_POWERSET_CAP,
            solver_cap: DEFAULT_SOLVER_CAP,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.refresh_every == 0
            || self.decay_every == 0
        {
            return Err(Error::Config(
                "epochs, batch_size, refresh_every and decay_every must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup_epochs exceeds epochs".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lr_decay", self.lr_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Association,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub mean_miml: f64,
    pub mean_association: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub method: Method,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricTrace {
    pub fn final_map(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_map)
    }
}

/// Validation predictions for every detection and class, scored by the class
/// probability times detection confidence, against the planted boxes.
pub fn evaluate_model(model: &ToyModel, split: &Split, class_count: usize) -> Result<f64> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (frame, truth) in split.frames.iter().zip(&split.truth) {
        let logits = model.logits(&frame.detections);
        for (i, det) in frame.detections.iter().enumerate() {
            for c in 0..class_count {
                preds.push(PredictionRecord {
                    frame_id: frame.frame_id,
                    bbox: det.bbox,
                    class_id: c,
                    score: sigmoid(logits[[i, c]]) * det.confidence,
                });
            }
        }
        for a in &truth.actors {
            for c in a.labels.classes() {
                gts.push(GroundTruthRecord {
                    frame_id: frame.frame_id,
                    bbox: a.bbox,
                    class_id: c,
                });
            }
        }
    }
    Ok(mean_average_precision(&preds, &gts, class_count, DEFAULT_IOU_THRESHOLD)?.map)
}

fn as_actors(frame: &WeakFrame, logits: ArrayView2<f64>) -> Vec<ActorDetection> {
    frame
        .detections
        .iter()
        .zip(logits.rows())
        .map(|(d, s)| ActorDetection {
            actor_id: d.actor_id,
            frame_id: frame.frame_id,
            bbox: Some(d.bbox),
            confidence: d.confidence,
            logits: s.to_vec(),
        })
        .collect()
}

/// Per-frame association targets from the current model; `None` when the
/// frame has no usable assignment (no actors, or no labels).
pub fn compute_assignments(
    model: &ToyModel,
    frames: &[WeakFrame],
    method: Method,
    sched: &Schedule,
) -> Result<Vec<Option<Vec<ActionSubset>>>> {
    frames
        .iter()
        .map(|frame| {
            if frame.detections.is_empty() || frame.labels.is_empty() {
                return Ok(None);
            }
            let logits = model.logits(&frame.detections);
            match method {
                Method::NoLp => {
                    let rows: Vec<Vec<f64>> =
                        logits.rows().into_iter().map(|r| r.to_vec()).collect();
                    Ok(Some(assign_without_lp(&rows, &frame.labels)?))
                }
                _ => {
                    let actors = as_actors(frame, logits.view());
                    let r = associate_frame(
                        &actors,
                        &frame.labels,
                        sched.powerset_cap,
                        sched.solver_cap,
                    )?;
                    Ok(r.feasible.then(|| r.subsets()))
                }
            }
        })
        .collect()
}

struct BatchAccumulator {
    grad_w: Array2<f64>,
    grad_b: Array1<f64>,
    frames: usize,
}

impl BatchAccumulator {
    fn new(f: usize, c: usize) -> Self {
        BatchAccumulator {
            grad_w: Array2::zeros((f, c)),
            grad_b: Array1::zeros(c),
            frames: 0,
        }
    }

    fn add(&mut self, detections: &[SyntheticDetection], grad_logits: &Array2<f64>) {
        let x = ToyModel::features(detections);
        self.grad_w += &x.t().dot(grad_logits);
        self.grad_b += &grad_logits.sum_axis(Axis(0));
        self.frames += 1;
    }

    fn flush(&mut self, model: &mut ToyModel, sched: &Schedule, lr: f64) {
        if self.frames == 0 {
            return;
        }
        let scale = 1.0 / self.frames as f64;
        self.grad_w *= scale;
        self.grad_b *= scale;
        model.step(&self.grad_w, &self.grad_b, sched, lr);
        self.grad_w.fill(0.0);
        self.grad_b.fill(0.0);
        self.frames = 0;
    }
}

/// Where a frame's per-actor targets come from during an epoch.
enum Targets<'a> {
    MimlOnly,
    Assigned(&'a [Option<Vec<ActionSubset>>]),
}

#[derive(Default)]
struct EpochLoss {
    total: f64,
    miml: f64,
    association: f64,
    frames: usize,
}

fn weak_epoch(
    model: &mut ToyModel,
    frames: &[WeakFrame],
    order: &[usize],
    targets: Targets<'_>,
    sched: &Schedule,
    lr: f64,
    epoch: usize,
) -> Result<EpochLoss> {
    let c = model.class_count();
    let f = model.weights.nrows();
    let mut acc = BatchAccumulator::new(f, c);
    let mut stats = EpochLoss::default();
    for &idx in order {
        let frame = &frames[idx];
        if frame.detections.is_empty() {
            continue;
        }
        let y: Vec<bool> = (0..c).map(|k| frame.labels.contains(k)).collect();
        let logits = model.logits(&frame.detections);
        let assigned = match &targets {
            Targets::MimlOnly => None,
            Targets::Assigned(all) => all[idx].as_deref(),
        };
        let b = combined_loss(&y, logits.view(), assigned, sched.alpha)?;
        if !b.combined.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("non-finite loss on frame {}", frame.frame_id),
            });
        }
        stats.total += b.combined;
        stats.miml += b.miml;
        stats.association += b.association;
        stats.frames += 1;
        acc.add(&frame.detections, &b.gradient);
        if acc.frames == sched.batch_size {
            acc.flush(model, sched, lr);
        }
    }
    acc.flush(model, sched, lr);
    Ok(stats)
}

fn supervised_epoch(
    model: &mut ToyModel,
    split: &Split,
    order: &[usize],
    sched: &Schedule,
    lr: f64,
) -> Result<EpochLoss> {
    let c = model.class_count();
    let f = model.weights.nrows();
    let mut acc = BatchAccumulator::new(f, c);
    let mut stats = EpochLoss::default();
    for &idx in order {
        let frame = &split.frames[idx];
        let truth = &split.truth[idx];
        let real: Vec<(SyntheticDetection, ActionSubset)> = frame
            .detections
            .iter()
            .zip(&truth.detection_source)
            .filter_map(|(d, s)| s.map(|g| (d.clone(), truth.actors[g].labels)))
            .collect();
        if real.is_empty() {
            continue;
        }
        let (dets, labels): (Vec<_>, Vec<_>) = real.into_iter().unzip();
        let logits = model.logits(&dets);
        let probs = sigmoid_matrix(logits.view());
        let loss = association_loss(&labels, probs.view())?;
        let grad = association_gradient(&labels, logits.view())?;
        stats.total += loss;
        stats.association += loss;
        stats.frames += 1;
        acc.add(&dets, &grad);
        if acc.frames == sched.batch_size {
            acc.flush(model, sched, lr);
        }
    }
    acc.flush(model, sched, lr);
    Ok(stats)
}

/// Trains `model` on `dataset` with the given method and schedule, recording
/// validation mAP after every epoch.
///
/// The weak methods only read `dataset.train.frames`; the hidden truth of the
/// training split is used by [`Method::Supervised`] alone.
pub fn train(
    model: &mut ToyModel,
    dataset: &SyntheticDataset,
    method: Method,
    sched: &Schedule,
) -> Result<MetricTrace> {
    sched.validate()?;
    let c = dataset.class_count();
    if model.class_count() != c {
        return Err(Error::Shape(format!(
            "model has {} classes, dataset {c}",
            model.class_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dataset.config.seed.wrapping_add(0x5eed));
    let frames = &dataset.train.frames;
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut assignments: Vec<Option<Vec<ActionSubset>>> = Vec::new();
    let mut trace = MetricTrace {
        method,
        seed: dataset.config.seed,
        epochs: Vec::with_capacity(sched.epochs),
    };
    for epoch in 0..sched.epochs {
        let lr = sched.learning_rate * sched.lr_decay.powi((epoch / sched.decay_every) as i32);
        order.shuffle(&mut rng);
        let (phase, stats) = match method {
            Method::Supervised => (
                Phase::Supervised,
                supervised_epoch(model, &dataset.train, &order, sched, lr)?,
            ),
            Method::Miml => (
                Phase::Warmup,
                weak_epoch(model, frames, &order, Targets::MimlOnly, sched, lr, epoch)?,
            ),
            Method::Proposed | Method::NoLp if epoch < sched.warmup_epochs => (
                Phase::Warmup,
                weak_epoch(model, frames, &order, Targets::MimlOnly, sched, lr, epoch)?,
            ),
            Method::Proposed | Method::NoLp => {
                if (epoch - sched.warmup_epochs).is_multiple_of(sched.refresh_every) {
                    assignments = compute_assignments(model, frames, method, sched)?;
                }
                (
                    Phase::Association,
                    weak_epoch(
                        model,
                        frames,
                        &order,
                        Targets::Assigned(&assignments),
                        sched,
                        lr,
                        epoch,
                    )?,
                )
            }
        };
        if !model.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: "non-finite model parameters".into(),
            });
        }
        let denom = stats.frames.max(1) as f64;
        let val_map = evaluate_model(model, &dataset.val, c)?;
        trace.epochs.push(EpochMetrics {
            epoch,
            phase,
            learning_rate: lr,
            mean_loss: stats.total / denom,
            mean_miml: stats.miml / denom,
            mean_association: stats.association / denom,
            val_map,
        });
        log::debug!(
            "{} epoch {epoch}: loss {:.5} val mAP {:.4}",
            method.name(),
            stats.total / denom,
            val_map
        );
    }
    Ok(trace)
}

/// The thresholding ablation: [`train`] with the solver swapped for
/// per-class thresholding.
pub fn ablate_without_lp(
    model: &mut ToyModel,
    dataset: &SyntheticDataset,
    sched: &Schedule,
) -> Result<MetricTrace> {
    train(model, dataset, Method::NoLp, sched)
}

/// Generates the dataset for `cfg` and trains a fresh model with `method`.
pub fn run_method(cfg: &SyntheticConfig, sched: &Schedule, method: Method) -> Result<MetricTrace> {
    let dataset = generate_dataset(cfg)?;
    let mut model = ToyModel::new(cfg.feature_dim, cfg.num_classes, cfg.seed);
    train(&mut model, &dataset, method, sched)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_clips: 60,
            val_clips: 30,
            seed: 7,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn seeded_generation_is_byte_identical() {
        let a = serde_json::to_string(&generate_dataset(&small()).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_dataset(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = serde_json::to_string(
            &generate_dataset(&SyntheticConfig { seed: 8, ..small() }).unwrap(),
        )
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn weak_labels_are_union_of_hidden_labels() {
        let ds = generate_dataset(&small()).unwrap();
        for split in [&ds.train, &ds.val] {
            for (f, t) in split.frames.iter().zip(&split.truth) {
                let union = t
                    .actors
                    .iter()
                    .fold(ActionSubset::EMPTY, |a, g| a.union(g.labels));
                assert_eq!(f.labels.as_subset(), union);
                assert!(t.actors.iter().all(|a| !a.labels.is_empty()));
                assert_eq!(f.detections.len(), t.detection_source.len());
            }
        }
    }

    #[test]
    fn label_noise_drops_labels() {
        let ds = generate_dataset(&SyntheticConfig {
            label_noise: 1.0,
            ..small()
        })
        .unwrap();
        let dropped = ds
            .train
            .frames
            .iter()
            .zip(&ds.train.truth)
            .filter(|(f, t)| {
                let union = t
                    .actors
                    .iter()
                    .fold(ActionSubset::EMPTY, |a, g| a.union(g.labels));
                f.labels.as_subset() != union
            })
            .count();
        assert!(dropped > 0);
    }

    #[test]
    fn interactions_pair_partner_classes() {
        let cfg = SyntheticConfig {
            solo_pair_weight: 0.0,
            ..small()
        };
        let data = generate_dataset(&cfg).unwrap();
        for t in &data.train.truth {
            let actors_with = |c: usize| t.actors.iter().filter(|a| a.labels.contains(c)).count();
            for pair in 0..cfg.paired_classes / 2 {
                let (a, b) = (2 * pair, 2 * pair + 1);
                assert_eq!(actors_with(a), actors_with(b));
                assert!(actors_with(a) <= 1);
                if actors_with(a) == 1 {
                    let both = t
                        .actors
                        .iter()
                        .any(|x| x.labels.contains(a) && x.labels.contains(b));
                    assert!(!both);
                }
            }
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        for cfg in [
            SyntheticConfig {
                train_clips: 0,
                ..small()
            },
            SyntheticConfig {
                num_classes: 0,
                ..small()
            },
            SyntheticConfig {
                label_noise: 1.5,
                ..small()
            },
            SyntheticConfig {
                feature_dim: 0,
                ..small()
            },
            SyntheticConfig {
                min_actors: 3,
                max_actors: 2,
                ..small()
            },
            SyntheticConfig {
                paired_classes: 3,
                ..small()
            },
            SyntheticConfig {
                paired_classes: 10,
                solo_pair_weight: 0.0,
                ..small()
            },
        ] {
            assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        }
        let sched = Schedule::default();
        assert!(Schedule {
            warmup_epochs: sched.epochs + 1,
            ..sched
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ideal_logits_recover_planted_labels() {
        let cfg = SyntheticConfig {
            false_positive_rate: 0.0,
            label_noise: 0.0,
            ..small()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for (f, t) in ds.train.frames.iter().zip(&ds.train.truth) {
            let actors: Vec<ActorDetection> = f
                .detections
                .iter()
                .zip(&t.detection_source)
                .map(|(d, s)| {
                    let gt = t.actors[s.unwrap()].labels;
                    ActorDetection {
                        actor_id: d.actor_id,
                        frame_id: f.frame_id,
                        bbox: Some(d.bbox),
                        confidence: d.confidence,
                        logits: (0..cfg.num_classes)
                            .map(|c| if gt.contains(c) { 30.0 } else { -30.0 })
                            .collect(),
                    }
                })
                .collect();
            let r = associate_frame(&actors, &f.labels, 20, 14).unwrap();
            for (&(_, got), src) in r.assignments.iter().zip(&t.detection_source) {
                assert_eq!(got, t.actors[src.unwrap()].labels);
            }
        }
    }

    #[test]
    fn miml_method_is_alpha_zero_proposed() {
        let ds = generate_dataset(&small()).unwrap();
        let sched = Schedule {
            epochs: 4,
            warmup_epochs: 2,
            ..Schedule::default()
        };
        let mut m1 = ToyModel::new(16, 10, 1);
        let mut m2 = m1.clone();
        let a = train(&mut m1, &ds, Method::Miml, &sched).unwrap();
        let b = train(
            &mut m2,
            &ds,
            Method::Proposed,
            &Schedule {
                alpha: 0.0,
                ..sched
            },
        )
        .unwrap();
        assert_eq!(m1.weights, m2.weights);
        let maps = |t: &MetricTrace| t.epochs.iter().map(|e| e.val_map).collect::<Vec<_>>();
        assert_eq!(maps(&a), maps(&b));
    }

    #[test]
    fn ablation_shares_warmup() {
        let ds = generate_dataset(&small()).unwrap();
        let sched = Schedule {
            epochs: 4,
            warmup_epochs: 2,
            ..Schedule::default()
        };
        let mut m1 = ToyModel::new(16, 10, 1);
        let mut m2 = m1.clone();
        let full = train(&mut m1, &ds, Method::Proposed, &sched).unwrap();
        let abl = ablate_without_lp(&mut m2, &ds, &sched).unwrap();
        assert_eq!(full.epochs[0], abl.epochs[0]);
        assert_eq!(full.epochs[1], abl.epochs[1]);
        assert_eq!(abl.epochs[2].phase, Phase::Association);
    }

    #[test]
    fn all_negative_logits_give_empty_targets() {
        let ds = generate_dataset(&small()).unwrap();
        let mut model = ToyModel::new(16, 10, 0);
        model.weights.fill(0.0);
        model.bias.fill(-5.0);
        let a = compute_assignments(&model, &ds.train.frames, Method::NoLp, &Schedule::default())
            .unwrap();
        assert!(a.iter().flatten().flatten().all(|s| s.is_empty()));
        let p = compute_assignments(
            &model,
            &ds.train.frames,
            Method::Proposed,
            &Schedule::default(),
        )
        .unwrap();
        assert!(p.iter().flatten().flatten().all(|s| !s.is_empty()));
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let sched = Schedule {
            epochs: 3,
            warmup_epochs: 1,
            ..Schedule::default()
        };
        let a = run_method(&small(), &sched, Method::Proposed).unwrap();
        let b = run_method(&small(), &sched, Method::Proposed).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }
}
