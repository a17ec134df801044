//! One training step per method over a paired source/target batch, the
//! epoch loop with model selection, and resumable checkpoints.
//!
//! Every method runs through [`compute_pass`]. Which parameter groups
//! receive gradient and which losses feed each group is decided by
//! [`Method`]:
//!
//! | method | prompt loss | backbone | perturbation ascent | discriminator |
//! |---|---|---|---|---|
//! | pt, spot | xe | frozen | none | none |
//! | ft | none | xe | none | none |
//! | pft | xe | xe | none | none |
//! | freelb | xe(x) + xe(x+d) | frozen | xe | none |
//! | vat | xe + KL | frozen | KL | none |
//! | optima | xe + KL | frozen | KL + adv | L_disc |
//! | dann | xe - w L_DD (reversed) | frozen | none | L_DD |
//!
//! Per-example work inside a batch runs on the rayon pool; results are
//! collected in batch order and reduced sequentially, so the outcome does not
//! depend on scheduling.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, UnlabeledSet};
use crate::discriminator::{self, DiscriminatorGrad, DiscriminatorParams, SOURCE, TARGET};
use crate::embedding::{Example, PromptParameters, Role};
use crate::encoder::{backward, forward, BackboneWeights, PredictionDistribution};
use crate::error::{Error, Result};
use crate::model::{Model, PromptInit};
use crate::objectives;
use crate::optim::{OptimizerKind, OptimizerState, Schedule};
use crate::perturbation::{ascend, init_delta, AscentConfig, BallMonitor, PerturbationBatch};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Frozen,
    Pt,
    Ft,
    Pft,
    Spot,
    Freelb,
    Vat,
    Dann,
    Optima,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Frozen,
        Method::Pt,
        Method::Ft,
        Method::Pft,
        Method::Spot,
        Method::Freelb,
        Method::Vat,
        Method::Dann,
        Method::Optima,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Frozen => "frozen",
            Method::Pt => "pt",
            Method::Ft => "ft",
            Method::Pft => "pft",
            Method::Spot => "spot",
            Method::Freelb => "freelb",
            Method::Vat => "vat",
            Method::Dann => "dann",
            Method::Optima => "optima",
        }
    }

    pub fn valid_ids() -> String {
        Self::ALL.iter().map(|m| m.id()).collect::<Vec<_>>().join(", ")
    }

    pub fn trains_prompt(self) -> bool {
        !matches!(self, Method::Frozen | Method::Ft)
    }

    pub fn trains_backbone(self) -> bool {
        matches!(self, Method::Ft | Method::Pft)
    }

    pub fn perturbs(self) -> bool {
        matches!(self, Method::Freelb | Method::Vat | Method::Optima)
    }

    pub fn has_discriminator(self) -> bool {
        matches!(self, Method::Optima | Method::Dann)
    }

    pub fn uses_target(self) -> bool {
        self.has_discriminator()
    }

    pub fn trains_anything(self) -> bool {
        self.trains_prompt() || self.trains_backbone()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`; valid ids: {}", Self::valid_ids())))
    }
}

/// Which objective the perturbation ascends besides the KL term. Both
/// readings give the same gradient: `L_disc` depends on the perturbation only
/// through `-log z(x_s + d)`, which is the adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AscentObjective {
    Adv,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Accuracy,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub prompt_lr: f64,
    pub backbone_lr: f64,
    pub delta_lr: f64,
    pub disc_lr: f64,
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub seed: u64,
    pub adv_weight: f64,
    pub ascent_objective: AscentObjective,
    pub dann_weight: f64,
    pub selection: Selection,
    pub prompt_init: PromptInit,
    pub prompt_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_steps: 500,
            eval_interval: 50,
            prompt_lr: 0.05,
            backbone_lr: 0.005,
            delta_lr: 0.5,
            disc_lr: 0.5,
            epsilon: 1.0,
            ascent_steps: 3,
            optimizer: OptimizerKind::Adam,
            schedule: Schedule::Constant,
            seed: 1,
            adv_weight: 3.0,
            ascent_objective: AscentObjective::Adv,
            dann_weight: 1.0,
            selection: Selection::Accuracy,
            prompt_init: PromptInit::TableRows,
            prompt_len: 8,
        }
    }
}

impl TrainConfig {
    /// Few-shot defaults: short runs evaluated every 4 steps.
    pub fn fewshot() -> Self {
        Self {
            batch_size: 8,
            max_steps: 200,
            eval_interval: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.prompt_len == 0 {
            return Err(Error::config("batch_size, eval_interval and prompt_len must be positive"));
        }
        for (name, v) in [
            ("prompt_lr", self.prompt_lr),
            ("backbone_lr", self.backbone_lr),
            ("delta_lr", self.delta_lr),
            ("disc_lr", self.disc_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("adv_weight", self.adv_weight),
            ("dann_weight", self.dann_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn ascent(&self) -> AscentConfig {
        AscentConfig {
            steps: self.ascent_steps,
            step_size: self.delta_lr,
        }
    }
}

/// Mutable training state. `backbone` is present only for methods that
/// train it; otherwise the model's frozen weights are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub prompt: PromptParameters,
    pub backbone: Option<BackboneWeights>,
    pub disc: Option<DiscriminatorParams>,
    pub prompt_opt: Option<OptimizerState>,
    pub backbone_opt: Option<OptimizerState>,
}

impl TrainState {
    pub fn init(model: &Model, method: Method, config: &TrainConfig) -> Result<Self> {
        let prompt = model.initial_prompt(config.prompt_init, config.prompt_len, config.seed)?;
        let backbone = method.trains_backbone().then(|| model.backbone.clone());
        Ok(Self::from_params(model, method, config, prompt, backbone))
    }

    /// Fresh optimizer state around given parameters.
    pub fn from_params(
        model: &Model,
        method: Method,
        config: &TrainConfig,
        prompt: PromptParameters,
        backbone: Option<BackboneWeights>,
    ) -> Self {
        let backbone = if method.trains_backbone() {
            Some(backbone.unwrap_or_else(|| model.backbone.clone()))
        } else {
            backbone
        };
        let prompt_opt = method
            .trains_prompt()
            .then(|| OptimizerState::new(config.optimizer, prompt.rows.len()));
        let backbone_opt = method
            .trains_backbone()
            .then(|| OptimizerState::new(config.optimizer, model.backbone.param_count()));
        let disc = method.has_discriminator().then(|| DiscriminatorParams::zeros(model.dim()));
        Self {
            step: 0,
            prompt,
            backbone,
            disc,
            prompt_opt,
            backbone_opt,
        }
    }

    pub fn backbone<'a>(&'a self, model: &'a Model) -> &'a BackboneWeights {
        self.backbone.as_ref().unwrap_or(&model.backbone)
    }
}

/// Selects which loss terms contribute to the parameter gradients of a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    /// Supervised and consistency terms (`xe`, `KL`, FreeLB's second `xe`).
    pub task: bool,
    /// Domain terms (`l_adv`, `L_disc`, `L_DD`).
    pub domain: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms { task: true, domain: true };
    pub const DOMAIN_ONLY: LossTerms = LossTerms { task: false, domain: true };
}

/// Per-step losses and monitors; serialized as one run-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub method: Method,
    /// Loss minimized by the trainable parameters this step.
    pub objective: f64,
    pub xe: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_loss: Option<f64>,
    pub prompt_lr: f64,
    pub ascent_calls: u64,
    pub ball_violations: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
}

/// Gradients of one pass, before any parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct PassGradients {
    pub prompt: Array2<f64>,
    pub backbone: Option<Vec<f64>>,
    pub disc: Option<DiscriminatorGrad>,
    pub record: StepRecord,
    pub monitor: BallMonitor,
}

struct SourceOut {
    prompt_grad: Array2<f64>,
    weight_grad: Option<Vec<f64>>,
    xe: f64,
    second: Option<f64>,
    pooled_clean: Array1<f64>,
    pooled_pert: Option<Array1<f64>>,
    monitor: BallMonitor,
}

struct TargetOut {
    prompt_grad: Option<Array2<f64>>,
    pooled: Array1<f64>,
}

struct PassContext<'a> {
    model: &'a Model,
    method: Method,
    config: &'a TrainConfig,
    prompt: &'a PromptParameters,
    backbone: &'a BackboneWeights,
    disc: Option<&'a DiscriminatorParams>,
    terms: LossTerms,
    step: u64,
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Option<Vec<f64>>, scale: f64) {
    if let Some(g) = g {
        let acc = acc.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, v) in acc.iter_mut().zip(g) {
            *a += scale * v;
        }
    }
}

impl PassContext<'_> {
    fn want_weights(&self) -> bool {
        self.method.trains_backbone()
    }

    fn dann_active(&self) -> bool {
        self.method == Method::Dann && self.terms.domain && self.config.dann_weight != 0.0
    }

    fn disc(&self) -> Result<&DiscriminatorParams> {
        self.disc
            .ok_or_else(|| Error::input(format!("method {} has no discriminator state", self.method)))
    }

    fn source(&self, index: usize, example: &Example) -> Result<SourceOut> {
        let y = example
            .label
            .ok_or_else(|| Error::input(format!("source example {index} has no label")))?;
        let (backbone, head) = (self.backbone, &self.model.head);
        let encoded = self.model.frontend.encode(self.prompt, example)?;
        let clean = forward(&encoded, backbone, head)?;
        let xe = objectives::xent(&clean.prediction, y)?;

        let d_logits = if self.terms.task {
            objectives::xent_logit_grad(&clean.prediction, y)?
        } else {
            Array1::zeros(head.classes())
        };
        let d_pooled = if self.dann_active() {
            let (_, g) = self.disc()?.nll_grads(clean.pooled.view(), SOURCE);
            Some(g * -self.config.dann_weight)
        } else {
            None
        };
        let grads = backward(&clean, backbone, head, d_logits.view(), d_pooled.as_ref().map(|g| g.view()), self.want_weights());
        let mut prompt_grad = grads.rows_with_role(&encoded.roles, Role::Prompt);
        let mut weight_grad = grads.weights;

        let mut monitor = BallMonitor::default();
        let mut second = None;
        let mut pooled_pert = None;
        if self.method.perturbs() {
            let dim = self.model.dim();
            let slots = encoded.input_slots;
            let live = encoded.input_len;
            let start = encoded.input_start;
            let seed_index = (self.step << 24) | index as u64;
            let mut r = rng::stream(self.config.seed, "delta", seed_index);
            let delta0 = init_delta(&[(slots, dim)], &[live], self.config.epsilon, &mut r, &mut monitor)?;
            let adv_weight = if self.method == Method::Optima { self.config.adv_weight } else { 0.0 };
            let disc = if adv_weight != 0.0 { Some(self.disc()?) } else { None };
            let grad_fn = |delta: &PerturbationBatch| -> Result<Vec<Array2<f64>>> {
                let pert = forward(&encoded.perturbed(&delta.deltas[0])?, backbone, head)?;
                let d_logits = match self.method {
                    Method::Freelb => objectives::xent_logit_grad(&pert.prediction, y)?,
                    _ => objectives::kl_logit_grad(&clean.prediction, &pert.prediction),
                };
                let d_pooled = disc.map(|d| {
                    let (_, g) = d.nll_grads(pert.pooled.view(), SOURCE);
                    g * adv_weight
                });
                let g = backward(&pert, backbone, head, d_logits.view(), d_pooled.as_ref().map(|g| g.view()), false);
                Ok(vec![g.input.slice(s![start..start + slots, ..]).to_owned()])
            };
            let delta = ascend(delta0, self.config.ascent(), &[live], grad_fn, &mut monitor)?;
            let perturbed = encoded.perturbed(&delta.deltas[0])?;
            let pert = forward(&perturbed, backbone, head)?;
            let (value, d_logits) = match self.method {
                Method::Freelb => (
                    objectives::xent(&pert.prediction, y)?,
                    objectives::xent_logit_grad(&pert.prediction, y)?,
                ),
                _ => (
                    objectives::kl_consistency(&clean.prediction, &pert.prediction)?,
                    objectives::kl_logit_grad(&clean.prediction, &pert.prediction),
                ),
            };
            if self.terms.task {
                let g = backward(&pert, backbone, head, d_logits.view(), None, self.want_weights());
                prompt_grad += &g.rows_with_role(&perturbed.roles, Role::Prompt);
                add_into(&mut weight_grad, g.weights, 1.0);
            }
            second = Some(value);
            pooled_pert = Some(pert.pooled);
        }
        Ok(SourceOut {
            prompt_grad,
            weight_grad,
            xe,
            second,
            pooled_clean: clean.pooled,
            pooled_pert,
            monitor,
        })
    }

    fn target(&self, example: &Example) -> Result<TargetOut> {
        let (backbone, head) = (self.backbone, &self.model.head);
        let encoded = self.model.frontend.encode(self.prompt, &example.without_label())?;
        let cache = forward(&encoded, backbone, head)?;
        let prompt_grad = if self.dann_active() {
            let (_, g) = self.disc()?.nll_grads(cache.pooled.view(), TARGET);
            let d_pooled = g * -self.config.dann_weight;
            let zeros = Array1::zeros(head.classes());
            let grads = backward(&cache, backbone, head, zeros.view(), Some(d_pooled.view()), false);
            Some(grads.rows_with_role(&encoded.roles, Role::Prompt))
        } else {
            None
        };
        Ok(TargetOut {
            prompt_grad,
            pooled: cache.pooled,
        })
    }
}

/// Forward, perturbation ascent, and backward for one paired batch at the
/// current parameters. Nothing is updated.
pub fn compute_pass(
    model: &Model,
    method: Method,
    config: &TrainConfig,
    state: &TrainState,
    source: &[&Example],
    target: &[&Example],
    terms: LossTerms,
) -> Result<PassGradients> {
    if source.is_empty() {
        return Err(Error::input("empty source batch"));
    }
    if method.uses_target() && target.len() != source.len() {
        return Err(Error::input(format!(
            "source batch has {} examples but target batch has {}",
            source.len(),
            target.len()
        )));
    }
    if let Some(i) = target.iter().position(|e| e.label.is_some()) {
        return Err(Error::input(format!("target example {i} carries a label")));
    }
    let ctx = PassContext {
        model,
        method,
        config,
        prompt: &state.prompt,
        backbone: state.backbone(model),
        disc: state.disc.as_ref(),
        terms,
        step: state.step,
    };
    let src: Vec<SourceOut> = source
        .par_iter()
        .enumerate()
        .map(|(i, e)| ctx.source(i, e))
        .collect::<Result<_>>()?;
    let tgt: Vec<TargetOut> = if method.uses_target() {
        target.par_iter().map(|e| ctx.target(e)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let bs = src.len() as f64;
    let mut prompt = Array2::<f64>::zeros(state.prompt.rows.dim());
    let mut backbone_grad = None;
    let mut monitor = BallMonitor::default();
    for out in &src {
        prompt.scaled_add(1.0 / bs, &out.prompt_grad);
        add_into(&mut backbone_grad, out.weight_grad.clone(), 1.0 / bs);
        monitor.ascend_calls += out.monitor.ascend_calls;
        monitor.projections += out.monitor.projections;
        monitor.checked += out.monitor.checked;
        monitor.violations += out.monitor.violations;
        monitor.max_norm_ratio = monitor.max_norm_ratio.max(out.monitor.max_norm_ratio);
    }
    for out in &tgt {
        if let Some(g) = &out.prompt_grad {
            prompt.scaled_add(1.0 / tgt.len() as f64, g);
        }
    }

    let xe = src.iter().map(|o| o.xe).sum::<f64>() / bs;
    let consistency = method
        .perturbs()
        .then(|| src.iter().map(|o| o.second.unwrap_or(0.0)).sum::<f64>() / bs);
    let mut record = StepRecord {
        step: state.step,
        method,
        objective: xe + consistency.unwrap_or(0.0),
        xe,
        consistency,
        adv: None,
        disc: None,
        domain_loss: None,
        prompt_lr: config.schedule.rate(config.prompt_lr, state.step as usize, config.max_steps as usize),
        ascent_calls: monitor.ascend_calls,
        ball_violations: monitor.violations,
        val_metric: None,
    };

    let disc_grad = match (method, state.disc.as_ref()) {
        (Method::Optima, Some(d)) => {
            let z_clean: Vec<f64> = src.iter().map(|o| d.source_prob(o.pooled_clean.view())).collect();
            let z_pert: Vec<f64> = src
                .iter()
                .map(|o| d.source_prob(o.pooled_pert.as_ref().expect("perturbed").view()))
                .collect();
            let z_t: Vec<f64> = tgt.iter().map(|o| d.source_prob(o.pooled.view())).collect();
            record.adv = Some(z_pert.iter().map(|z| objectives::adv_loss(*z)).sum::<f64>() / bs);
            record.disc = Some(objectives::disc_loss(&z_pert, &z_clean, &z_t)?);
            let mut g = DiscriminatorGrad::zeros(model.dim());
            if terms.domain {
                for o in &src {
                    g.add_scaled(&d.nll_grads(o.pooled_pert.as_ref().expect("perturbed").view(), SOURCE).0, 1.0 / bs);
                    g.add_scaled(&d.nll_grads(o.pooled_clean.view(), SOURCE).0, 1.0 / bs);
                }
                for o in &tgt {
                    g.add_scaled(&d.nll_grads(o.pooled.view(), TARGET).0, 1.0 / tgt.len() as f64);
                }
            }
            Some(g)
        }
        (Method::Dann, Some(d)) => {
            let z_s: Vec<f64> = src.iter().map(|o| d.source_prob(o.pooled_clean.view())).collect();
            let z_t: Vec<f64> = tgt.iter().map(|o| d.source_prob(o.pooled.view())).collect();
            let l_dd = objectives::domain_discrimination_loss(&z_s, &z_t)?;
            record.domain_loss = Some(l_dd);
            record.objective = xe - config.dann_weight * l_dd;
            let mut g = DiscriminatorGrad::zeros(model.dim());
            if terms.domain {
                for o in &src {
                    g.add_scaled(&d.nll_grads(o.pooled_clean.view(), SOURCE).0, 1.0 / bs);
                }
                for o in &tgt {
                    g.add_scaled(&d.nll_grads(o.pooled.view(), TARGET).0, 1.0 / tgt.len() as f64);
                }
            }
            Some(g)
        }
        _ => None,
    };

    Ok(PassGradients {
        prompt,
        backbone: backbone_grad,
        disc: disc_grad,
        record,
        monitor,
    })
}

/// Gradient the prompt update would receive from the selected loss terms.
pub fn prompt_update_gradient(
    model: &Model,
    method: Method,
    config: &TrainConfig,
    state: &TrainState,
    source: &[&Example],
    target: &[&Example],
    terms: LossTerms,
) -> Result<Array2<f64>> {
    Ok(compute_pass(model, method, config, state, source, target, terms)?.prompt)
}

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::numerical("train step", format!("non-finite {what}")))
    }
}

/// One step of the method's update rule. On error the state is untouched.
pub fn train_step(
    model: &Model,
    method: Method,
    config: &TrainConfig,
    state: &mut TrainState,
    source: &[&Example],
    target: &[&Example],
) -> Result<(StepRecord, BallMonitor)> {
    let pass = compute_pass(model, method, config, state, source, target, LossTerms::ALL)?;
    check_finite("loss", [pass.record.objective])?;
    check_finite("prompt gradient", pass.prompt.iter().copied())?;
    if let Some(g) = &pass.backbone {
        check_finite("backbone gradient", g.iter().copied())?;
    }
    if let Some(g) = &pass.disc {
        check_finite("discriminator gradient", g.w.iter().chain(g.b.iter()).copied())?;
    }

    let mut next = state.clone();
    let total = config.max_steps as usize;
    let step = state.step as usize;
    if let Some(opt) = next.prompt_opt.as_mut() {
        let lr = config.schedule.rate(config.prompt_lr, step, total);
        let flat = next.prompt.rows.as_slice_mut().expect("contiguous prompt");
        opt.step(flat, pass.prompt.as_slice().expect("contiguous gradient"), lr)?;
    }
    if let (Some(opt), Some(weights), Some(g)) = (next.backbone_opt.as_mut(), next.backbone.as_mut(), pass.backbone.as_ref()) {
        let lr = config.schedule.rate(config.backbone_lr, step, total);
        let mut flat = weights.to_flat();
        opt.step(&mut flat, g, lr)?;
        weights.set_flat(&flat)?;
    }
    if let (Some(d), Some(g)) = (next.disc.as_ref(), pass.disc.as_ref()) {
        next.disc = Some(discriminator::update(d, g, config.disc_lr)?);
    }
    next.step += 1;
    *state = next;
    Ok((pass.record, pass.monitor))
}

/// Indices of the batch at `step` for an `n`-element set: a fresh seeded
/// permutation per epoch, read cyclically.
pub fn batch_indices(n: usize, batch: usize, seed: u64, stream: &str, step: u64) -> Vec<usize> {
    let start = step as usize * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + batch)
        .map(|pos| {
            let epoch = pos / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng::stream(seed, stream, epoch as u64));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("cached").1[pos % n]
        })
        .collect()
}

pub fn predict(
    model: &Model,
    prompt: &PromptParameters,
    backbone: &BackboneWeights,
    examples: &[Example],
) -> Result<Vec<PredictionDistribution>> {
    examples
        .par_iter()
        .map(|e| {
            let encoded = model.frontend.encode(prompt, e)?;
            Ok(forward(&encoded, backbone, &model.head)?.prediction)
        })
        .collect()
}

/// Higher is better: accuracy, or negated mean cross-entropy.
pub fn selection_metric(
    model: &Model,
    prompt: &PromptParameters,
    backbone: &BackboneWeights,
    set: &LabeledSet,
    selection: Selection,
) -> Result<f64> {
    let preds = predict(model, prompt, backbone, set.examples())?;
    let labels = set.labels();
    Ok(match selection {
        Selection::Accuracy => {
            let hits = preds.iter().zip(&labels).filter(|(p, y)| p.argmax() == **y).count();
            hits as f64 / labels.len().max(1) as f64
        }
        Selection::Loss => -objectives::mean_xent(&preds, &labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    pub metric: f64,
    pub prompt: PromptParameters,
    pub backbone: Option<BackboneWeights>,
    pub disc: Option<DiscriminatorParams>,
}

impl BestRecord {
    fn capture(state: &TrainState, metric: f64) -> Self {
        Self {
            step: state.step,
            metric,
            prompt: state.prompt.clone(),
            backbone: state.backbone.clone(),
            disc: state.disc.clone(),
        }
    }

    pub fn backbone<'a>(&'a self, model: &'a Model) -> &'a BackboneWeights {
        self.backbone.as_ref().unwrap_or(&model.backbone)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub method: Method,
    pub config: TrainConfig,
    pub state: TrainState,
    pub best: Option<BestRecord>,
}

impl Checkpoint {
    pub fn initial(model: &Model, method: Method, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            method,
            config: config.clone(),
            state: TrainState::init(model, method, config)?,
            best: None,
        })
    }

    /// Best-selected parameters, falling back to the current state.
    pub fn best_prompt(&self) -> &PromptParameters {
        self.best.as_ref().map_or(&self.state.prompt, |b| &b.prompt)
    }

    pub fn best_backbone<'a>(&'a self, model: &'a Model) -> &'a BackboneWeights {
        match &self.best {
            Some(b) => b.backbone(model),
            None => self.state.backbone(model),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::input(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

pub struct TrainData<'a> {
    pub train: &'a LabeledSet,
    pub target: Option<&'a UnlabeledSet>,
    pub val: &'a LabeledSet,
}

/// Run the step loop from `ckpt.state` up to `ckpt.config.max_steps`,
/// evaluating every `eval_interval` steps and at the end, keeping the best
/// parameters under the configured selection metric. On error `ckpt` holds
/// the last good state.
pub fn run_training(
    model: &Model,
    data: &TrainData<'_>,
    ckpt: &mut Checkpoint,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<()> {
    let method = ckpt.method;
    let config = ckpt.config.clone();
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::input("empty training set"));
    }
    if data.val.is_empty() {
        return Err(Error::input("empty validation set"));
    }
    let target = if method.uses_target() {
        let t = data
            .target
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::input(format!("method {method} needs unlabeled target data")))?;
        Some(t)
    } else {
        None
    };
    let evaluate = |state: &TrainState| {
        selection_metric(model, &state.prompt, state.backbone(model), data.val, config.selection)
    };
    if ckpt.best.is_none() {
        let metric = evaluate(&ckpt.state)?;
        ckpt.best = Some(BestRecord::capture(&ckpt.state, metric));
    }
    let max_steps = if method.trains_anything() { config.max_steps } else { 0 };
    let b = config.batch_size;
    while ckpt.state.step < max_steps {
        let step = ckpt.state.step;
        let src_idx = batch_indices(data.train.len(), b, config.seed, "source-order", step);
        let source: Vec<&Example> = src_idx.iter().map(|i| &data.train.examples()[*i]).collect();
        let target_batch: Vec<&Example> = match target {
            Some(t) => batch_indices(t.len(), b, config.seed, "target-order", step)
                .iter()
                .map(|i| &t.examples()[*i])
                .collect(),
            None => Vec::new(),
        };
        let (mut record, _) = train_step(model, method, &config, &mut ckpt.state, &source, &target_batch)?;
        let done = ckpt.state.step;
        if done % config.eval_interval == 0 || done == max_steps {
            let metric = evaluate(&ckpt.state)?;
            record.val_metric = Some(metric);
            if metric > ckpt.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.metric) {
                ckpt.best = Some(BestRecord::capture(&ckpt.state, metric));
            }
        }
        log(&record);
    }
    Ok(())
}

/// Train from initialization on the source set (plus unlabeled target data
/// for methods that use it), selecting on the source validation set.
pub fn pretrain(
    model: &Model,
    method: Method,
    config: &TrainConfig,
    data: &TrainData<'_>,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::initial(model, method, config)?;
    run_training(model, data, &mut ckpt, log)?;
    Ok(ckpt)
}

fn check_all_classes(set: &LabeledSet, classes: usize, what: &str) -> Result<()> {
    let counts = set.class_counts(classes);
    if let Some(c) = counts.iter().position(|n| *n == 0) {
        return Err(Error::input(format!("{what} has no examples of class {c}")));
    }
    Ok(())
}

/// Continue tuning from the selected parameters of `start` on a few-shot
/// split, selecting on its dev half. Prompt-tuning methods tune the prompt
/// only; backbone methods keep their trainable groups.
pub fn fewshot_finetune(
    model: &Model,
    method: Method,
    start: &Checkpoint,
    train: &LabeledSet,
    dev: &LabeledSet,
    config: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    check_all_classes(train, model.classes(), "few-shot train split")?;
    check_all_classes(dev, model.classes(), "few-shot dev split")?;
    config.validate()?;
    let tuning = match method {
        Method::Frozen => Method::Frozen,
        m if m.trains_backbone() => m,
        _ => Method::Pt,
    };
    let backbone = start.best.as_ref().and_then(|b| b.backbone.clone()).or_else(|| start.state.backbone.clone());
    let state = TrainState::from_params(model, tuning, config, start.best_prompt().clone(), backbone);
    let mut ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        method: tuning,
        config: config.clone(),
        state,
        best: None,
    };
    run_training(
        model,
        &TrainData {
            train,
            target: None,
            val: dev,
        },
        &mut ckpt,
        log,
    )?;
    ckpt.method = method;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, DomainPairSpec};
    use crate::model::ModelConfig;

    fn small() -> (Model, crate::data::DomainPair) {
        let spec = DomainPairSpec {
            n_source: 120,
            n_target: 120,
            n_eval: 60,
            ..DomainPairSpec::default()
        };
        let model = Model::build(&spec, &ModelConfig { dim: 8, hidden: 16, ..ModelConfig::default() }).unwrap();
        (model, generate_pair(&spec).unwrap())
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_steps: 6,
            eval_interval: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn method_ids_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
        let err = "bert".parse::<Method>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("optima"));
    }

    #[test]
    fn batch_indices_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, 3, "x", s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 4, 3, "x", 7), batch_indices(10, 4, 3, "x", 7));
        assert_eq!(batch_indices(3, 5, 1, "x", 0).len(), 5);
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let (model, pair) = small();
        let config = quick();
        let mut state = TrainState::init(&model, Method::Optima, &config).unwrap();
        let src: Vec<&Example> = pair.source.examples()[..4].iter().collect();
        let tgt: Vec<&Example> = pair.target_train.examples()[..3].iter().collect();
        let before = state.clone();
        assert!(matches!(
            train_step(&model, Method::Optima, &config, &mut state, &src, &tgt),
            Err(Error::Input(_))
        ));
        assert_eq!(state, before);
    }

    #[test]
    fn labeled_target_batch_is_rejected() {
        let (model, pair) = small();
        let config = quick();
        let mut state = TrainState::init(&model, Method::Dann, &config).unwrap();
        let src: Vec<&Example> = pair.source.examples()[..2].iter().collect();
        assert!(train_step(&model, Method::Dann, &config, &mut state, &src, &src).is_err());
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let (model, pair) = small();
        let config = TrainConfig { max_steps: 0, ..quick() };
        let data = TrainData {
            train: &pair.source,
            target: Some(&pair.target_train),
            val: &pair.target_eval,
        };
        let ckpt = pretrain(&model, Method::Optima, &config, &data, &mut |_| {}).unwrap();
        let init = TrainState::init(&model, Method::Optima, &config).unwrap();
        assert_eq!(ckpt.state, init);
        assert_eq!(ckpt.best.as_ref().unwrap().prompt, init.prompt);
    }

    #[test]
    fn missing_target_is_an_input_error() {
        let (model, pair) = small();
        let data = TrainData {
            train: &pair.source,
            target: None,
            val: &pair.target_eval,
        };
        assert!(matches!(
            pretrain(&model, Method::Dann, &quick(), &data, &mut |_| {}),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn log_records_every_step_with_periodic_eval() {
        let (model, pair) = small();
        let data = TrainData {
            train: &pair.source,
            target: Some(&pair.target_train),
            val: &pair.target_eval,
        };
        let mut records = Vec::new();
        pretrain(&model, Method::Optima, &quick(), &data, &mut |r| records.push(r.clone())).unwrap();
        assert_eq!(records.len(), 6);
        let evals: Vec<u64> = records.iter().filter(|r| r.val_metric.is_some()).map(|r| r.step).collect();
        assert_eq!(evals, vec![2, 5]);
        assert!(records.iter().all(|r| r.disc.is_some() && r.adv.is_some() && r.consistency.is_some()));
        let line = serde_json::to_string(&records[0]).unwrap();
        assert!(line.contains("\"step\":0"));
    }

    #[test]
    fn checkpoint_round_trips_through_disk() {
        let (model, pair) = small();
        let data = TrainData {
            train: &pair.source,
            target: Some(&pair.target_train),
            val: &pair.target_eval,
        };
        let ckpt = pretrain(&model, Method::Optima, &quick(), &data, &mut |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn fewshot_rejects_missing_class() {
        let (model, pair) = small();
        let start = Checkpoint::initial(&model, Method::Pt, &quick()).unwrap();
        let only0 = LabeledSet::new(pair.source.examples().iter().filter(|e| e.label == Some(0)).take(8).cloned().collect()).unwrap();
        assert!(matches!(
            fewshot_finetune(&model, Method::Pt, &start, &only0, &pair.source, &quick(), &mut |_| {}),
            Err(Error::Input(_))
        ));
    }
}
