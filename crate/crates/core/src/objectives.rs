//! Scalar losses as pure functions of prediction distributions and
//! discriminator outputs, plus their gradients with respect to the logits
//! that produced the distributions.
//!
//! Every logarithm is taken of `max(p, PROB_FLOOR)`. Gradients are the exact
//! derivatives of the clamped expressions: a clamped probability contributes
//! no gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array1;

use crate::encoder::PredictionDistribution;
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times a discriminator probability hit the clamp, process-wide.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

fn log_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn log_floor_counted(p: f64) -> f64 {
    if p < PROB_FLOOR {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
    }
    log_floor(p)
}

fn check_normalized(pred: &PredictionDistribution, what: &str) -> Result<()> {
    let total = pred.probs.sum();
    if !total.is_finite() || (total - 1.0).abs() > 1e-6 || pred.probs.iter().any(|p| *p < 0.0) {
        return Err(Error::input(format!(
            "{what} is not a probability distribution (sum {total})"
        )));
    }
    Ok(())
}

fn check_label(pred: &PredictionDistribution, y: usize) -> Result<()> {
    if y >= pred.classes() {
        return Err(Error::input(format!(
            "label {y} out of range for {} classes",
            pred.classes()
        )));
    }
    Ok(())
}

/// `-log p[y]`.
pub fn xent(pred: &PredictionDistribution, y: usize) -> Result<f64> {
    check_label(pred, y)?;
    Ok(-log_floor(pred.probs[y]))
}

/// d xent / d logits.
pub fn xent_logit_grad(pred: &PredictionDistribution, y: usize) -> Result<Array1<f64>> {
    check_label(pred, y)?;
    if pred.probs[y] < PROB_FLOOR {
        return Ok(Array1::zeros(pred.classes()));
    }
    let mut g = pred.probs.clone();
    g[y] -= 1.0;
    Ok(g)
}

/// `KL(clean || perturbed)`.
pub fn kl_consistency(clean: &PredictionDistribution, pert: &PredictionDistribution) -> Result<f64> {
    check_normalized(clean, "clean prediction")?;
    check_normalized(pert, "perturbed prediction")?;
    if clean.classes() != pert.classes() {
        return Err(Error::input("class count mismatch"));
    }
    Ok(clean
        .probs
        .iter()
        .zip(pert.probs.iter())
        .filter(|(c, _)| **c > 0.0)
        .map(|(c, p)| c * (log_floor(*c) - log_floor(*p)))
        .sum())
}

/// d KL / d perturbed-logits; the clean distribution is a constant target.
pub fn kl_logit_grad(clean: &PredictionDistribution, pert: &PredictionDistribution) -> Array1<f64> {
    let live: Vec<bool> = pert.probs.iter().map(|p| *p >= PROB_FLOOR).collect();
    // all classes live: the clean mass is 1 by construction
    let mass: f64 = if live.iter().all(|l| *l) {
        1.0
    } else {
        clean.probs.iter().zip(&live).filter(|(_, l)| **l).map(|(c, _)| *c).sum()
    };
    Array1::from_shape_fn(pert.classes(), |j| {
        let own = if live[j] { clean.probs[j] } else { 0.0 };
        pert.probs[j] * mass - own
    })
}

/// `-log P(source | x_s + delta)`; `z` is the discriminator's source probability.
pub fn adv_loss(z_source: f64) -> f64 {
    -log_floor_counted(z_source)
}

fn check_probs(zs: &[f64], what: &str) -> Result<()> {
    if zs.iter().any(|z| !z.is_finite() || !(0.0..=1.0).contains(z)) {
        return Err(Error::input(format!("{what} must lie in [0, 1]")));
    }
    Ok(())
}

/// Batch mean of `-log z(x_s+d) - log z(x_s) - log(1 - z(x_t))`.
pub fn disc_loss(z_source_pert: &[f64], z_source_clean: &[f64], z_target: &[f64]) -> Result<f64> {
    let n = z_source_pert.len();
    if n == 0 || z_source_clean.len() != n || z_target.len() != n {
        return Err(Error::input(format!(
            "disc_loss needs equal non-empty batches, got {}/{}/{}",
            n,
            z_source_clean.len(),
            z_target.len()
        )));
    }
    check_probs(z_source_pert, "perturbed source probabilities")?;
    check_probs(z_source_clean, "source probabilities")?;
    check_probs(z_target, "target probabilities")?;
    let total: f64 = (0..n)
        .map(|i| {
            -log_floor_counted(z_source_pert[i])
                - log_floor_counted(z_source_clean[i])
                - log_floor_counted(1.0 - z_target[i])
        })
        .sum();
    Ok(total / n as f64)
}

/// Domain discrimination loss without the perturbed term: mean of
/// `-log z(x_s)` plus mean of `-log(1 - z(x_t))`.
pub fn domain_discrimination_loss(z_source: &[f64], z_target: &[f64]) -> Result<f64> {
    if z_source.is_empty() || z_target.is_empty() {
        return Err(Error::input("domain discrimination loss needs non-empty batches"));
    }
    check_probs(z_source, "source probabilities")?;
    check_probs(z_target, "target probabilities")?;
    let s: f64 = z_source.iter().map(|z| -log_floor_counted(*z)).sum::<f64>() / z_source.len() as f64;
    let t: f64 = z_target.iter().map(|z| -log_floor_counted(1.0 - z)).sum::<f64>() / z_target.len() as f64;
    Ok(s + t)
}

/// Batch mean of `xent(clean, y) + KL(clean || perturbed)`.
pub fn regularized_loss(
    clean: &[PredictionDistribution],
    pert: &[PredictionDistribution],
    labels: &[usize],
) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::input("regularized loss over an empty batch"));
    }
    if pert.len() != clean.len() || labels.len() != clean.len() {
        return Err(Error::input("batch length mismatch"));
    }
    let mut total = 0.0;
    for ((c, p), y) in clean.iter().zip(pert).zip(labels) {
        total += xent(c, *y)? + kl_consistency(c, p)?;
    }
    Ok(total / clean.len() as f64)
}

pub fn mean_xent(preds: &[PredictionDistribution], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::input("cross-entropy over an empty batch"));
    }
    if preds.len() != labels.len() {
        return Err(Error::input("batch length mismatch"));
    }
    let mut total = 0.0;
    for (p, y) in preds.iter().zip(labels) {
        total += xent(p, *y)?;
    }
    Ok(total / preds.len() as f64)
}

/// `E[xent] - L_DD`: the quantity the prompt minimizes under DANN.
pub fn dann_objective(
    preds: &[PredictionDistribution],
    labels: &[usize],
    z_source: &[f64],
    z_target: &[f64],
) -> Result<f64> {
    Ok(mean_xent(preds, labels)? - domain_discrimination_loss(z_source, z_target)?)
}
