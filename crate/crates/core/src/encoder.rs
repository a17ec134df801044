//! Frozen backbone: one pre-residual self-attention block (single head) with
//! a tanh feed-forward layer and per-channel layer scales, read out through a
//! verbalizer matrix at the mask position.
//!
//! ```text
//! X1 = X  + g_a * (softmax_masked(X Wq (X Wk)^T / sqrt(d)) X Wv) Wo
//! X2 = X1 + g_f * tanh(X1 W1) W2
//! logits = R X2[mask],   pooled = mean_{input rows} X2
//! ```
//!
//! Pad positions are excluded as attention keys, so their content never
//! reaches any valid position. The reverse pass is written out by hand and
//! checked against central differences in the tests.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddedBatch, EmbeddedExample, Role};
use crate::error::{Error, Result};
use crate::rng;

/// Initialization scales for [`BackboneWeights::seeded`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneInit {
    pub attn_std: f64,
    pub ffn_std: f64,
    pub attn_layer_scale: f64,
    pub ffn_layer_scale: f64,
}

impl Default for BackboneInit {
    fn default() -> Self {
        Self {
            attn_std: 1.0,
            ffn_std: 4.0,
            attn_layer_scale: 1.0,
            ffn_layer_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub gamma_attn: Array1<f64>,
    pub gamma_ffn: Array1<f64>,
}

impl BackboneWeights {
    /// Gaussian weights with fan-in scaling (`std / sqrt(fan_in)`).
    pub fn seeded(dim: usize, hidden: usize, init: BackboneInit, seed: u64) -> Self {
        let mut r = rng::stream(seed, "backbone", 0);
        let mut draw = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std / (rows as f64).sqrt()).expect("valid std");
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut r))
        };
        let wq = draw(dim, dim, init.attn_std);
        let wk = draw(dim, dim, init.attn_std);
        let wv = draw(dim, dim, init.attn_std);
        let wo = draw(dim, dim, init.attn_std);
        let w1 = draw(dim, hidden, init.ffn_std);
        let w2 = draw(hidden, dim, init.ffn_std);
        Self {
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
            gamma_attn: Array1::from_elem(dim, init.attn_layer_scale),
            gamma_ffn: Array1::from_elem(dim, init.ffn_layer_scale),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.flat_iter().count()
    }

    fn flat_iter(&self) -> impl Iterator<Item = &f64> {
        self.wq
            .iter()
            .chain(self.wk.iter())
            .chain(self.wv.iter())
            .chain(self.wo.iter())
            .chain(self.w1.iter())
            .chain(self.w2.iter())
            .chain(self.gamma_attn.iter())
            .chain(self.gamma_ffn.iter())
    }

    fn flat_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.wq
            .iter_mut()
            .chain(self.wk.iter_mut())
            .chain(self.wv.iter_mut())
            .chain(self.wo.iter_mut())
            .chain(self.w1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.gamma_attn.iter_mut())
            .chain(self.gamma_ffn.iter_mut())
    }

    /// All parameters in a fixed order (wq, wk, wv, wo, w1, w2, gamma_attn, gamma_ffn).
    pub fn to_flat(&self) -> Vec<f64> {
        self.flat_iter().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::input(format!(
                "expected {} backbone parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        for (dst, src) in self.flat_iter_mut().zip(values) {
            *dst = *src;
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_values(self.flat_iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.flat_iter().all(|v| v.is_finite())
    }
}

/// SHA-256 over the little-endian bytes of a value sequence.
pub fn digest_values(values: impl IntoIterator<Item = f64>) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Readout from the mask-position hidden state to one logit per label word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizerHead {
    pub readout: Array2<f64>,
    pub labels: Vec<String>,
}

impl VerbalizerHead {
    pub fn new(readout: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if readout.nrows() != labels.len() {
            return Err(Error::input(format!(
                "verbalizer has {} rows but {} label names",
                readout.nrows(),
                labels.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::input("verbalizer needs at least two labels"));
        }
        Ok(Self { readout, labels })
    }

    pub fn seeded(labels: Vec<String>, dim: usize, std: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "verbalizer", 0);
        let normal = Normal::new(0.0, std / (dim as f64).sqrt()).expect("valid std");
        let readout = Array2::from_shape_fn((labels.len(), dim), |_| normal.sample(&mut r));
        Self::new(readout, labels)
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub probs: Array1<f64>,
}

impl PredictionDistribution {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::input("probabilities must be finite and non-negative"));
        }
        let total = probs.sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: ArrayView1<'_, f64>) -> Self {
        Self {
            probs: softmax(logits),
        }
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

/// Intermediate activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    valid: Vec<bool>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    heads: Array2<f64>,
    attn_out: Array2<f64>,
    x1: Array2<f64>,
    act: Array2<f64>,
    ffn_out: Array2<f64>,
    x2: Array2<f64>,
    mask_position: usize,
    input: std::ops::Range<usize>,
    pub logits: Array1<f64>,
    pub prediction: PredictionDistribution,
    pub pooled: Array1<f64>,
}

impl ForwardCache {
    pub fn hidden(&self) -> &Array2<f64> {
        &self.x2
    }
}

/// Gradients of a scalar loss with respect to the embedded input rows and,
/// when requested, the backbone parameters (flattened in [`BackboneWeights::to_flat`] order).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Array2<f64>,
    pub weights: Option<Vec<f64>>,
}

impl Gradients {
    pub fn rows_with_role(&self, roles: &[Role], role: Role) -> Array2<f64> {
        let idx: Vec<usize> = roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect();
        self.input.select(Axis(0), &idx)
    }
}

fn check_activation(name: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let bad = m.iter().filter(|v| !v.is_finite()).count();
    let max = m
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    Err(Error::numerical(
        "encoder forward",
        format!("{bad} non-finite entries in {name}; max finite magnitude {max:.3e}"),
    ))
}

pub fn forward(
    example: &EmbeddedExample,
    weights: &BackboneWeights,
    head: &VerbalizerHead,
) -> Result<ForwardCache> {
    let d = weights.dim();
    if example.dim() != d || head.readout.ncols() != d {
        return Err(Error::input(format!(
            "dimension mismatch: input d={}, backbone d={d}, head d={}",
            example.dim(),
            head.readout.ncols()
        )));
    }
    if example.input_len == 0 {
        return Err(Error::input("example has no input rows"));
    }
    let x = example.embeddings.clone();
    check_activation("input", &x)?;
    let valid: Vec<bool> = example.roles.iter().map(|r| *r != Role::Pad).collect();

    let q = x.dot(&weights.wq);
    let k = x.dot(&weights.wk);
    let v = x.dot(&weights.wv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = q.dot(&k.t()) * scale;
    for mut row in attn.rows_mut() {
        let max = row
            .iter()
            .zip(&valid)
            .filter(|(_, ok)| **ok)
            .fold(f64::NEG_INFINITY, |m, (s, _)| m.max(*s));
        let mut total = 0.0;
        for (s, ok) in row.iter_mut().zip(&valid) {
            *s = if *ok { (*s - max).exp() } else { 0.0 };
            total += *s;
        }
        row /= total;
    }
    let heads = attn.dot(&v);
    let attn_out = heads.dot(&weights.wo);
    let x1 = &x + &(&attn_out * &weights.gamma_attn);
    let act = x1.dot(&weights.w1).mapv(f64::tanh);
    let ffn_out = act.dot(&weights.w2);
    let x2 = &x1 + &(&ffn_out * &weights.gamma_ffn);
    check_activation("hidden state", &x2)?;

    let mask_position = example.mask_position;
    let logits = head.readout.dot(&x2.row(mask_position));
    let prediction = PredictionDistribution::from_logits(logits.view());
    let input = example.input_range();
    let pooled = x2
        .slice(s![input.clone(), ..])
        .mean_axis(Axis(0))
        .expect("non-empty input");

    Ok(ForwardCache {
        x,
        valid,
        q,
        k,
        v,
        attn,
        heads,
        attn_out,
        x1,
        act,
        ffn_out,
        x2,
        mask_position,
        input,
        logits,
        prediction,
        pooled,
    })
}

/// Batched forward; each example is processed independently, so results do
/// not depend on batch composition.
pub fn forward_batch(
    batch: &EmbeddedBatch,
    weights: &BackboneWeights,
    head: &VerbalizerHead,
) -> Result<(Vec<PredictionDistribution>, Array2<f64>)> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut pooled = Array2::zeros((batch.len(), weights.dim()));
    for (i, ex) in batch.rows.iter().enumerate() {
        let cache = forward(ex, weights, head)?;
        pooled.row_mut(i).assign(&cache.pooled);
        preds.push(cache.prediction);
    }
    Ok((preds, pooled))
}

/// Reverse pass for a loss whose upstream gradients are `d_logits` (at the
/// mask readout) and `d_pooled` (at the mean-pooled input representation).
pub fn backward(
    cache: &ForwardCache,
    weights: &BackboneWeights,
    head: &VerbalizerHead,
    d_logits: ArrayView1<'_, f64>,
    d_pooled: Option<ArrayView1<'_, f64>>,
    want_weights: bool,
) -> Gradients {
    let d = weights.dim();
    let len = cache.x.nrows();
    let scale = 1.0 / (d as f64).sqrt();

    let mut d_x2 = Array2::<f64>::zeros((len, d));
    d_x2.row_mut(cache.mask_position)
        .assign(&head.readout.t().dot(&d_logits));
    if let Some(dp) = d_pooled {
        let share = &dp / cache.input.len() as f64;
        for i in cache.input.clone() {
            let mut row = d_x2.row_mut(i);
            row += &share;
        }
    }

    // X2 = X1 + g_f * F
    let d_ffn_out = &d_x2 * &weights.gamma_ffn;
    let d_act = d_ffn_out.dot(&weights.w2.t());
    let mut d_pre = d_act;
    Zip::from(&mut d_pre)
        .and(&cache.act)
        .for_each(|g, t| *g *= 1.0 - t * t);
    let mut d_x1 = d_x2.clone();
    d_x1 += &d_pre.dot(&weights.w1.t());

    // X1 = X + g_a * O
    let d_attn_out = &d_x1 * &weights.gamma_attn;
    let d_heads = d_attn_out.dot(&weights.wo.t());
    let d_attn = d_heads.dot(&cache.v.t());
    let d_v = cache.attn.t().dot(&d_heads);
    let mut d_scores = Array2::<f64>::zeros((len, len));
    for i in 0..len {
        let a = cache.attn.row(i);
        let da = d_attn.row(i);
        let inner = a.dot(&da);
        let mut out = d_scores.row_mut(i);
        for j in 0..len {
            if cache.valid[j] {
                out[j] = a[j] * (da[j] - inner) * scale;
            }
        }
    }
    let d_q = d_scores.dot(&cache.k);
    let d_k = d_scores.t().dot(&cache.q);

    let mut d_x = d_x1.clone();
    d_x += &d_q.dot(&weights.wq.t());
    d_x += &d_k.dot(&weights.wk.t());
    d_x += &d_v.dot(&weights.wv.t());

    let weight_grads = want_weights.then(|| {
        let d_wq = cache.x.t().dot(&d_q);
        let d_wk = cache.x.t().dot(&d_k);
        let d_wv = cache.x.t().dot(&d_v);
        let d_wo = cache.heads.t().dot(&d_attn_out);
        let d_w1 = cache.x1.t().dot(&d_pre);
        let d_w2 = cache.act.t().dot(&d_ffn_out);
        let d_gamma_attn = (&d_x1 * &cache.attn_out).sum_axis(Axis(0));
        let d_gamma_ffn = (&d_x2 * &cache.ffn_out).sum_axis(Axis(0));
        d_wq.iter()
            .chain(d_wk.iter())
            .chain(d_wv.iter())
            .chain(d_wo.iter())
            .chain(d_w1.iter())
            .chain(d_w2.iter())
            .chain(d_gamma_attn.iter())
            .chain(d_gamma_ffn.iter())
            .copied()
            .collect()
    });

    Gradients {
        input: d_x,
        weights: weight_grads,
    }
}

const SNAPSHOT_VERSION: u32 = 1;

/// Versioned on-disk container for the backbone and verbalizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub version: u32,
    pub seed: u64,
    pub dim: usize,
    pub hidden: usize,
    pub backbone: BackboneWeights,
    pub head: VerbalizerHead,
}

impl WeightSnapshot {
    pub fn new(seed: u64, backbone: BackboneWeights, head: VerbalizerHead) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            seed,
            dim: backbone.dim(),
            hidden: backbone.hidden(),
            backbone,
            head,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let snap: Self = serde_json::from_str(&text)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::input(format!(
                "unsupported snapshot version {} (expected {SNAPSHOT_VERSION})",
                snap.version
            )));
        }
        if snap.backbone.dim() != snap.dim || snap.backbone.hidden() != snap.hidden {
            return Err(Error::input("snapshot shapes do not match header"));
        }
        Ok(snap)
    }
}
