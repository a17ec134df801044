//! Comparison methods. All methods share the trainer's step loop; this module
//! fixes what each one trains, where its few-shot run starts, and audits the
//! trainable sets.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, UnlabeledSet};
use crate::embedding::Example;
use crate::encoder::digest_values;
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, Metrics};
use crate::model::Model;
use crate::trainer::{
    batch_indices, fewshot_finetune, predict, pretrain, train_step, Checkpoint, Method, StepRecord, TrainConfig,
    TrainData, TrainState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSet {
    pub prompt: bool,
    pub backbone: bool,
    pub discriminator: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewshotStart {
    /// Untrained prompt, model weights as built.
    Initialization,
    /// Parameters selected during source pretraining.
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub trainable: TrainableSet,
    /// Loss driving the prompt or backbone update, in plain notation.
    pub task_loss: &'static str,
    /// Loss driving the discriminator, if any.
    pub domain_loss: Option<&'static str>,
    pub perturbation: Option<&'static str>,
    pub uses_target: bool,
    pub fewshot_start: FewshotStart,
}

impl MethodSpec {
    pub fn of(method: Method) -> Self {
        let (task_loss, domain_loss, perturbation) = match method {
            Method::Frozen => ("none", None, None),
            Method::Pt | Method::Ft | Method::Pft | Method::Spot => ("xe", None, None),
            Method::Freelb => ("xe(x) + xe(x+d)", None, Some("ascend xe(x+d)")),
            Method::Vat => ("xe + KL", None, Some("ascend KL")),
            Method::Optima => ("xe + KL", Some("L_disc"), Some("ascend KL + adv")),
            Method::Dann => ("xe - w * L_DD", Some("L_DD"), None),
        };
        let fewshot_start = match method {
            Method::Frozen | Method::Pt | Method::Ft | Method::Pft => FewshotStart::Initialization,
            _ => FewshotStart::Pretrained,
        };
        Self {
            method,
            trainable: TrainableSet {
                prompt: method.trains_prompt(),
                backbone: method.trains_backbone(),
                discriminator: method.has_discriminator(),
            },
            task_loss,
            domain_loss,
            perturbation,
            uses_target: method.uses_target(),
            fewshot_start,
        }
    }

    /// Number of scalar parameters updated by this method.
    pub fn trainable_count(&self, model: &Model, config: &TrainConfig) -> usize {
        let mut n = 0;
        if self.trainable.prompt {
            n += config.prompt_len * model.dim();
        }
        if self.trainable.backbone {
            n += model.backbone.param_count();
        }
        if self.trainable.discriminator {
            n += 2 * model.dim() + 2;
        }
        n
    }
}

/// Zero-shot predictions with the untrained prompt.
pub fn frozen_eval(model: &Model, config: &TrainConfig, set: &LabeledSet) -> Result<(Vec<usize>, Metrics)> {
    let prompt = model.initial_prompt(config.prompt_init, config.prompt_len, config.seed)?;
    let preds: Vec<usize> = predict(model, &prompt, &model.backbone, set.examples())?
        .iter()
        .map(|p| p.argmax())
        .collect();
    let metrics = compute_metrics(&preds, &set.labels(), model.classes())?;
    Ok((preds, metrics))
}

/// Evaluate the selected parameters of a checkpoint.
pub fn evaluate_checkpoint(model: &Model, ckpt: &Checkpoint, set: &LabeledSet) -> Result<(Vec<usize>, Metrics)> {
    let preds: Vec<usize> = predict(model, ckpt.best_prompt(), ckpt.best_backbone(model), set.examples())?
        .iter()
        .map(|p| p.argmax())
        .collect();
    let metrics = compute_metrics(&preds, &set.labels(), model.classes())?;
    Ok((preds, metrics))
}

/// Source training for any method. Target data is passed only to methods
/// that use it.
pub fn train_method(
    model: &Model,
    method: Method,
    config: &TrainConfig,
    source: &LabeledSet,
    source_val: &LabeledSet,
    target: Option<&UnlabeledSet>,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let data = TrainData {
        train: source,
        target: if method.uses_target() { target } else { None },
        val: source_val,
    };
    pretrain(model, method, config, &data, log)
}

fn require(method: Method, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&method) {
        Ok(())
    } else {
        Err(Error::config(format!("method {method} is not valid here")))
    }
}

pub fn pt_train(model: &Model, config: &TrainConfig, train: &LabeledSet, val: &LabeledSet) -> Result<Checkpoint> {
    train_method(model, Method::Pt, config, train, val, None, &mut |_| {})
}

pub fn ft_train(model: &Model, config: &TrainConfig, train: &LabeledSet, val: &LabeledSet) -> Result<Checkpoint> {
    train_method(model, Method::Ft, config, train, val, None, &mut |_| {})
}

pub fn pft_train(model: &Model, config: &TrainConfig, train: &LabeledSet, val: &LabeledSet) -> Result<Checkpoint> {
    train_method(model, Method::Pft, config, train, val, None, &mut |_| {})
}

pub fn freelb_train(model: &Model, config: &TrainConfig, train: &LabeledSet, val: &LabeledSet) -> Result<Checkpoint> {
    train_method(model, Method::Freelb, config, train, val, None, &mut |_| {})
}

pub fn vat_train(model: &Model, config: &TrainConfig, train: &LabeledSet, val: &LabeledSet) -> Result<Checkpoint> {
    train_method(model, Method::Vat, config, train, val, None, &mut |_| {})
}

pub fn dann_train(
    model: &Model,
    config: &TrainConfig,
    train: &LabeledSet,
    val: &LabeledSet,
    target: &UnlabeledSet,
) -> Result<Checkpoint> {
    train_method(model, Method::Dann, config, train, val, Some(target), &mut |_| {})
}

/// Prompt pretraining on the source domain followed by few-shot tuning on
/// the target split.
pub fn spot_transfer(
    model: &Model,
    source: &LabeledSet,
    source_val: &LabeledSet,
    fewshot_train: &LabeledSet,
    fewshot_dev: &LabeledSet,
    pretrain_config: &TrainConfig,
    fewshot_config: &TrainConfig,
) -> Result<Checkpoint> {
    let pre = train_method(model, Method::Spot, pretrain_config, source, source_val, None, &mut |_| {})?;
    fewshot_finetune(model, Method::Spot, &pre, fewshot_train, fewshot_dev, fewshot_config, &mut |_| {})
}

/// Starting checkpoint of a method's few-shot run.
pub fn fewshot_start(
    model: &Model,
    method: Method,
    pretrained: Option<&Checkpoint>,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    match MethodSpec::of(method).fewshot_start {
        FewshotStart::Initialization => Checkpoint::initial(model, method, config),
        FewshotStart::Pretrained => {
            let ckpt = pretrained.ok_or_else(|| Error::input(format!("method {method} needs a pretrained checkpoint")))?;
            if ckpt.method != method {
                return Err(Error::input(format!(
                    "checkpoint was trained with {} but {method} was requested",
                    ckpt.method
                )));
            }
            Ok(ckpt.clone())
        }
    }
}

/// Digests of every parameter group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDigests {
    pub prompt: String,
    pub backbone: String,
    pub head: String,
    pub table: String,
    pub discriminator: Option<String>,
}

impl GroupDigests {
    pub fn of(model: &Model, state: &TrainState) -> Self {
        Self {
            prompt: digest_values(state.prompt.rows.iter().copied()),
            backbone: state.backbone(model).digest(),
            head: digest_values(model.head.readout.iter().copied()),
            table: digest_values(model.frontend.table.matrix().iter().copied()),
            discriminator: state.disc.as_ref().map(|d| d.digest()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps: u64,
    pub prompt_changes: u64,
    pub backbone_changes: u64,
    pub discriminator_changes: u64,
}

/// Run `steps` training steps and check after each one that only the
/// method's trainable groups changed.
pub fn audit_trainable_sets(
    model: &Model,
    method: Method,
    config: &TrainConfig,
    source: &LabeledSet,
    target: Option<&UnlabeledSet>,
    steps: u64,
) -> Result<AuditReport> {
    let spec = MethodSpec::of(method);
    let mut state = TrainState::init(model, method, config)?;
    let mut report = AuditReport::default();
    let mut before = GroupDigests::of(model, &state);
    for step in 0..steps {
        let src: Vec<&Example> = batch_indices(source.len(), config.batch_size, config.seed, "source-order", step)
            .into_iter()
            .map(|i| &source.examples()[i])
            .collect();
        let tgt: Vec<&Example> = match (spec.uses_target, target) {
            (true, Some(t)) => batch_indices(t.len(), config.batch_size, config.seed, "target-order", step)
                .into_iter()
                .map(|i| &t.examples()[i])
                .collect(),
            (true, None) => return Err(Error::input(format!("method {method} needs unlabeled target data"))),
            (false, _) => Vec::new(),
        };
        if method.trains_anything() {
            train_step(model, method, config, &mut state, &src, &tgt)?;
        }
        let after = GroupDigests::of(model, &state);
        let changed = |a: &str, b: &str, allowed: bool, what: &str, count: &mut u64| -> Result<()> {
            if a != b {
                if !allowed {
                    return Err(Error::numerical(
                        "trainable-set audit",
                        format!("{method} changed the {what} at step {step}"),
                    ));
                }
                *count += 1;
            }
            Ok(())
        };
        changed(&before.prompt, &after.prompt, spec.trainable.prompt, "prompt", &mut report.prompt_changes)?;
        changed(&before.backbone, &after.backbone, spec.trainable.backbone, "backbone", &mut report.backbone_changes)?;
        changed(&before.head, &after.head, false, "verbalizer head", &mut 0)?;
        changed(&before.table, &after.table, false, "embedding table", &mut 0)?;
        match (&before.discriminator, &after.discriminator) {
            (Some(a), Some(b)) => changed(a, b, spec.trainable.discriminator, "discriminator", &mut report.discriminator_changes)?,
            (None, None) => {}
            _ => return Err(Error::numerical("trainable-set audit", "discriminator allocation changed")),
        }
        if after.discriminator.is_some() != spec.trainable.discriminator {
            return Err(Error::numerical("trainable-set audit", format!("{method} discriminator allocation mismatch")));
        }
        report.steps += 1;
        before = after;
    }
    Ok(report)
}

/// Reject a method for an operation that does not apply to it.
pub fn check_method(method: Method, allowed: &[Method]) -> Result<()> {
    require(method, allowed)
}
