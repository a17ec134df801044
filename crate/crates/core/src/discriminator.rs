//! Linear two-way domain probe over pooled representations.

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{digest_values, softmax};
use crate::error::{Error, Result};
use crate::rng;

/// Logit index of the source domain; `z = P(source)`.
pub const SOURCE: usize = 0;
pub const TARGET: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl DiscriminatorGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: Array2::zeros((dim, 2)),
            b: Array1::zeros(2),
        }
    }

    pub fn add_scaled(&mut self, other: &DiscriminatorGrad, scale: f64) {
        self.w.scaled_add(scale, &other.w);
        self.b.scaled_add(scale, &other.b);
    }
}

impl DiscriminatorParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: Array2::zeros((dim, 2)),
            b: Array1::zeros(2),
        }
    }

    pub fn seeded(dim: usize, std: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "discriminator", 0);
        let normal = Normal::new(0.0, std / (dim as f64).sqrt()).expect("valid std");
        Self {
            w: Array2::from_shape_fn((dim, 2), |_| normal.sample(&mut r)),
            b: Array1::zeros(2),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn logits(&self, pooled: ArrayView1<'_, f64>) -> Array1<f64> {
        pooled.dot(&self.w) + &self.b
    }

    pub fn probs(&self, pooled: ArrayView1<'_, f64>) -> Array1<f64> {
        softmax(self.logits(pooled).view())
    }

    pub fn source_prob(&self, pooled: ArrayView1<'_, f64>) -> f64 {
        self.probs(pooled)[SOURCE]
    }

    /// `z = P(source)` for every row of a `B x d` pooled matrix.
    pub fn discriminate(&self, pooled: &Array2<f64>) -> Vec<f64> {
        pooled.rows().into_iter().map(|r| self.source_prob(r)).collect()
    }

    pub fn digest(&self) -> String {
        digest_values(self.w.iter().chain(self.b.iter()).copied())
    }

    /// Gradients of `-log P(class | pooled)` w.r.t. the parameters and the pooled input.
    pub fn nll_grads(&self, pooled: ArrayView1<'_, f64>, class: usize) -> (DiscriminatorGrad, Array1<f64>) {
        let mut d_logits = self.probs(pooled);
        if d_logits[class] < crate::objectives::PROB_FLOOR {
            let dim = self.dim();
            return (DiscriminatorGrad::zeros(dim), Array1::zeros(dim));
        }
        d_logits[class] -= 1.0;
        let w = pooled
            .to_owned()
            .insert_axis(ndarray::Axis(1))
            .dot(&d_logits.view().insert_axis(ndarray::Axis(0)));
        let d_pooled = self.w.dot(&d_logits);
        (DiscriminatorGrad { w, b: d_logits }, d_pooled)
    }

    pub fn accuracy(&self, pooled: &Array2<f64>, classes: &[usize]) -> f64 {
        let hits = pooled
            .rows()
            .into_iter()
            .zip(classes)
            .filter(|(r, c)| {
                let z = self.source_prob(*r);
                let pred = if z >= 0.5 { SOURCE } else { TARGET };
                pred == **c
            })
            .count();
        hits as f64 / classes.len().max(1) as f64
    }
}

/// One plain SGD step `theta <- theta - lr * grad`.
pub fn update(params: &DiscriminatorParams, grad: &DiscriminatorGrad, lr: f64) -> Result<DiscriminatorParams> {
    if grad.w.iter().chain(grad.b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical("discriminator update", "non-finite gradient"));
    }
    let mut next = params.clone();
    next.w.scaled_add(-lr, &grad.w);
    next.b.scaled_add(-lr, &grad.b);
    Ok(next)
}

/// Gradient of the mean NLL over `(pooled row, domain class)` pairs.
pub fn batch_gradient(params: &DiscriminatorParams, pooled: &Array2<f64>, classes: &[usize]) -> DiscriminatorGrad {
    let mut total = DiscriminatorGrad::zeros(params.dim());
    let n = classes.len().max(1) as f64;
    for (row, class) in pooled.rows().into_iter().zip(classes) {
        let (g, _) = params.nll_grads(row, *class);
        total.add_scaled(&g, 1.0 / n);
    }
    total
}
