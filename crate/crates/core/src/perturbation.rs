//! Per-example L2-ball perturbations and normalized projected gradient ascent.
//!
//! Each example owns an `input_slots x d` perturbation; the ball constraint
//! is on the flattened matrix. Rows past an example's real input length sit
//! over padding and are held at zero.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBatch {
    pub deltas: Vec<Array2<f64>>,
    pub epsilon: f64,
}

impl PerturbationBatch {
    pub fn zeros(shapes: &[(usize, usize)], epsilon: f64) -> Self {
        Self {
            deltas: shapes.iter().map(|s| Array2::zeros(*s)).collect(),
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.deltas.iter().map(l2_norm).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            step_size: 0.1,
        }
    }
}

pub fn l2_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Nearest point of the closed ball `{||d|| <= epsilon}`: `epsilon * phi / max(epsilon, ||phi||)`.
pub fn project(phi: &Array2<f64>, epsilon: f64) -> Array2<f64> {
    if epsilon <= 0.0 {
        return Array2::zeros(phi.raw_dim());
    }
    let norm = l2_norm(phi);
    if norm <= epsilon {
        return phi.clone();
    }
    phi * (epsilon / norm)
}

fn zero_pad_rows(m: &mut Array2<f64>, live_rows: usize) {
    if live_rows < m.nrows() {
        m.slice_mut(s![live_rows.., ..]).fill(0.0);
    }
}

/// Callbacks fired by [`init_delta`] and [`ascend`]; lets callers count
/// ascent invocations and audit every projected iterate.
pub trait AscentObserver {
    fn on_ascend(&mut self) {}
    fn on_projection(&mut self, _batch: &PerturbationBatch) {}
}

pub struct NoopObserver;

impl AscentObserver for NoopObserver {}

/// Counts ascent calls and checks the ball constraint after every projection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BallMonitor {
    pub ascend_calls: u64,
    pub projections: u64,
    pub checked: u64,
    pub violations: u64,
    pub max_norm_ratio: f64,
}

pub const BALL_TOLERANCE: f64 = 1e-9;

impl AscentObserver for BallMonitor {
    fn on_ascend(&mut self) {
        self.ascend_calls += 1;
    }

    fn on_projection(&mut self, batch: &PerturbationBatch) {
        self.projections += 1;
        for d in &batch.deltas {
            let norm = l2_norm(d);
            self.checked += 1;
            if norm > batch.epsilon + BALL_TOLERANCE {
                self.violations += 1;
            }
            if batch.epsilon > 0.0 {
                self.max_norm_ratio = self.max_norm_ratio.max(norm / batch.epsilon);
            }
        }
    }
}

/// Uniform(-1, 1) entries over the live rows, projected onto the ball.
/// `shapes[i] = (input_slots, d)`, `live_rows[i]` = real input length.
pub fn init_delta<R: Rng>(
    shapes: &[(usize, usize)],
    live_rows: &[usize],
    epsilon: f64,
    rng: &mut R,
    observer: &mut dyn AscentObserver,
) -> Result<PerturbationBatch> {
    if shapes.len() != live_rows.len() {
        return Err(Error::input("shapes and live_rows differ in length"));
    }
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::input(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let deltas = shapes
        .iter()
        .zip(live_rows)
        .map(|(&(rows, cols), &live)| {
            let mut d = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0));
            zero_pad_rows(&mut d, live);
            project(&d, epsilon)
        })
        .collect();
    let batch = PerturbationBatch { deltas, epsilon };
    observer.on_projection(&batch);
    Ok(batch)
}

/// `config.steps` iterations of `d <- P(d + step * g / ||g||)` per example,
/// where `grad_fn` returns the ascent-objective gradient at the current
/// iterate for every example. Examples with zero gradient keep their `d`.
pub fn ascend<F>(
    mut delta: PerturbationBatch,
    config: AscentConfig,
    live_rows: &[usize],
    mut grad_fn: F,
    observer: &mut dyn AscentObserver,
) -> Result<PerturbationBatch>
where
    F: FnMut(&PerturbationBatch) -> Result<Vec<Array2<f64>>>,
{
    observer.on_ascend();
    if live_rows.len() != delta.len() {
        return Err(Error::input("live_rows length differs from batch"));
    }
    for step in 0..config.steps {
        let grads = grad_fn(&delta)?;
        if grads.len() != delta.len() {
            return Err(Error::input("gradient batch length mismatch"));
        }
        for (i, (d, mut g)) in delta.deltas.iter_mut().zip(grads).enumerate() {
            if g.dim() != d.dim() {
                return Err(Error::input("gradient shape mismatch"));
            }
            zero_pad_rows(&mut g, live_rows[i]);
            let norm = l2_norm(&g);
            if !norm.is_finite() {
                return Err(Error::numerical(
                    "perturbation ascent",
                    format!("non-finite gradient for example {i} at step {step}"),
                ));
            }
            if norm == 0.0 {
                continue;
            }
            let stepped = &*d + &(g * (config.step_size / norm));
            *d = project(&stepped, delta.epsilon);
        }
        observer.on_projection(&delta);
    }
    Ok(delta)
}
