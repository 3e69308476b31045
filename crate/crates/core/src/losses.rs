//! MIML bag loss, per-actor association loss and their weighted combination,
//! with analytic gradients with respect to the logits.
//!
//! Binary cross entropy is averaged over classes inside every term; the
//! association term is summed over actors and the MIML term is taken once per
//! frame.

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::ActionSubset;

/// Probability clamp used when evaluating cross entropy.
pub const PROB_EPS: f64 = 1e-7;

pub const DEFAULT_ALPHA: f64 = 0.3;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Elementwise logistic, clamped to `[ε, 1-ε]`.
pub fn sigmoid_probs(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&s| clamp_prob(sigmoid(s))).collect()
}

pub fn sigmoid_matrix(logits: ArrayView2<f64>) -> Array2<f64> {
    logits.mapv(|s| clamp_prob(sigmoid(s)))
}

fn bce(target: bool, p: f64) -> f64 {
    let p = clamp_prob(p);
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Binary target vector of length `class_count` from a subset.
pub fn subset_targets(subset: ActionSubset, class_count: usize) -> Vec<bool> {
    (0..class_count).map(|c| subset.contains(c)).collect()
}

fn check_targets(targets: &[bool], cols: usize) -> Result<()> {
    if targets.len() != cols {
        return Err(Error::Shape(format!(
            "target vector has {} entries, predictions have {cols} classes",
            targets.len()
        )));
    }
    Ok(())
}

fn check_assignments(assignments: &[ActionSubset], rows: usize, cols: usize) -> Result<()> {
    if assignments.len() != rows {
        return Err(Error::Shape(format!(
            "{} assignments for {rows} actors",
            assignments.len()
        )));
    }
    if let Some(s) = assignments.iter().find(|s| s.span() > cols) {
        return Err(Error::Shape(format!(
            "assigned subset {s:?} references a class outside [0, {cols})"
        )));
    }
    Ok(())
}

/// Bag loss: per class, BCE between the clip label and the highest actor
/// probability, averaged over classes.
pub fn miml_loss(targets: &[bool], probs: ArrayView2<f64>) -> Result<f64> {
    let (n, c) = probs.dim();
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    check_targets(targets, c)?;
    let mut total = 0.0;
    for (col, &y) in probs.columns().into_iter().zip(targets) {
        let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += bce(y, m);
    }
    Ok(total / c as f64)
}

/// Sum over actors of the class-averaged BCE against each actor's assigned subset.
pub fn association_loss(assignments: &[ActionSubset], probs: ArrayView2<f64>) -> Result<f64> {
    let (n, c) = probs.dim();
    check_assignments(assignments, n, c)?;
    let mut total = 0.0;
    for (row, &subset) in probs.rows().into_iter().zip(assignments) {
        let mut actor = 0.0;
        for (cls, &p) in row.iter().enumerate() {
            actor += bce(subset.contains(cls), p);
        }
        total += actor / c as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub miml: f64,
    pub association: f64,
    pub combined: f64,
    pub alpha: f64,
    /// `∂ combined / ∂ logits`, shape `n × C`.
    pub gradient: Array2<f64>,
}

/// Index of the highest logit per class, lowest actor index on ties.
fn argmax_rows(logits: ArrayView2<f64>) -> Vec<usize> {
    logits
        .columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Gradient of the association term alone: `(σ(s) − ŷ)/C` for every entry.
pub fn association_gradient(
    assignments: &[ActionSubset],
    logits: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (n, c) = logits.dim();
    check_assignments(assignments, n, c)?;
    let inv_c = 1.0 / c as f64;
    Ok(Array2::from_shape_fn((n, c), |(i, cls)| {
        let y = if assignments[i].contains(cls) {
            1.0
        } else {
            0.0
        };
        (sigmoid(logits[[i, cls]]) - y) * inv_c
    }))
}

/// Analytic gradient of `miml + α·association` with respect to the logits.
///
/// Each BCE-on-logistic term contributes `(σ(s) − y)/C`; the MIML term only
/// reaches the argmax actor of each class. `σ` is the unclamped logistic.
pub fn loss_gradients(
    targets: &[bool],
    logits: ArrayView2<f64>,
    assignments: Option<&[ActionSubset]>,
    alpha: f64,
) -> Result<Array2<f64>> {
    let (n, c) = logits.dim();
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    check_targets(targets, c)?;
    let mut grad = match assignments {
        Some(a) => association_gradient(a, logits)? * alpha,
        None => Array2::<f64>::zeros((n, c)),
    };
    let inv_c = 1.0 / c as f64;
    for (cls, &row) in argmax_rows(logits).iter().enumerate() {
        let y = if targets[cls] { 1.0 } else { 0.0 };
        grad[[row, cls]] += (sigmoid(logits[[row, cls]]) - y) * inv_c;
    }
    Ok(grad)
}

/// `miml + α·association` plus its gradient. `assignments = None` drops the
/// association term (warmup, frames without a usable assignment).
pub fn combined_loss(
    targets: &[bool],
    logits: ArrayView2<f64>,
    assignments: Option<&[ActionSubset]>,
    alpha: f64,
) -> Result<LossBreakdown> {
    let probs = sigmoid_matrix(logits);
    let miml = miml_loss(targets, probs.view())?;
    let association = match assignments {
        Some(a) => association_loss(a, probs.view())?,
        None => 0.0,
    };
    let gradient = loss_gradients(targets, logits, assignments, alpha)?;
    Ok(LossBreakdown {
        miml,
        association,
        combined: combine(miml, association, alpha),
        alpha,
        gradient,
    })
}

#[inline]
pub fn combine(miml: f64, association: f64, alpha: f64) -> f64 {
    miml + alpha * association
}
