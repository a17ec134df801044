//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line per criterion, and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use optima::baselines::{fewshot_start, train_method};
use optima::data::{generate_pair, DomainPair, DomainPairSpec, LabeledSet};
use optima::discriminator::{DiscriminatorParams, SOURCE, TARGET};
use optima::embedding::{DomainTag, EmbeddingTable, Example, Frontend, PromptParameters, Role};
use optima::encoder::{backward, forward, BackboneInit, BackboneWeights, ForwardCache, VerbalizerHead};
use optima::eval::{compute_metrics, ttest, AggregateReport, RunReport, TTestKind};
use optima::model::{Model, ModelConfig};
use optima::objectives;
use optima::perturbation::project;
use optima::trainer::{
    batch_indices, compute_pass, fewshot_finetune, selection_metric, train_step, LossTerms, Method, Selection,
    StepRecord, TrainConfig, TrainState,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- criterion 1

/// Nearest point of the radius-`eps` disk to `p`, by a coarse angular grid
/// on the boundary followed by nested grid refinement.
fn disk_nearest_by_search(p: [f64; 2], eps: f64) -> [f64; 2] {
    if (p[0] * p[0] + p[1] * p[1]).sqrt() <= eps {
        return p;
    }
    let dist = |a: f64| (eps * a.cos() - p[0]).powi(2) + (eps * a.sin() - p[1]).powi(2);
    let mut best = 0.0;
    let mut best_d = f64::INFINITY;
    let n = 720;
    for k in 0..n {
        let a = k as f64 * std::f64::consts::TAU / n as f64;
        if dist(a) < best_d {
            best_d = dist(a);
            best = a;
        }
    }
    let mut half = std::f64::consts::TAU / n as f64;
    for _ in 0..40 {
        let (lo, step) = (best - half, half / 50.0);
        for k in 0..=100 {
            let a = lo + k as f64 * step;
            if dist(a) < best_d {
                best_d = dist(a);
                best = a;
            }
        }
        half = 2.0 * step;
    }
    [eps * best.cos(), eps * best.sin()]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst_closed: f64 = 0.0;
    let mut worst_grid: f64 = 0.0;
    let mut worst_idem: f64 = 0.0;
    for case in 0..1000 {
        let scale = 10f64.powf(r.random_range(-2.0..1.5));
        let eps = if case % 50 == 0 { 0.0 } else { r.random_range(0.0..4.0) };
        let (rows, cols) = if case % 2 == 0 { (1, 2) } else { (r.random_range(1..5), r.random_range(1..6)) };
        let normal = Normal::new(0.0, scale).unwrap();
        let phi = Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut r));
        let got = project(&phi, eps);
        let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let closed = if norm <= eps { phi.clone() } else { &phi * (eps / norm) };
        worst_closed = worst_closed.max((&got - &closed).iter().fold(0.0, |m, v| m.max(v.abs())));
        if (rows, cols) == (1, 2) {
            let g = disk_nearest_by_search([phi[[0, 0]], phi[[0, 1]]], eps);
            worst_grid = worst_grid.max((got[[0, 0]] - g[0]).abs().max((got[[0, 1]] - g[1]).abs()));
        }
        let again = project(&got, eps);
        worst_idem = worst_idem.max((&again - &got).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "closed-form err {worst_closed:.2e}, grid-search err {worst_grid:.2e}, idempotence err {worst_idem:.2e}, {secs:.2}s"
    );
    ensure(worst_closed <= 1e-6, format!("closed form mismatch: {detail}"))?;
    ensure(worst_grid <= 1e-6, format!("grid oracle mismatch: {detail}"))?;
    ensure(worst_idem <= 1e-12, format!("not idempotent: {detail}"))?;
    ensure(secs < 10.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 2

struct Instance {
    frontend: Frontend,
    backbone: BackboneWeights,
    head: VerbalizerHead,
    disc: DiscriminatorParams,
    prompt: PromptParameters,
    source: Example,
    target: Example,
    label: usize,
    delta: Array2<f64>,
}

fn random_instance(seed: u64) -> Instance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = r.random_range(2..=8);
    let n = r.random_range(1..=4);
    let classes = r.random_range(2..=3);
    let m = r.random_range(1..=3);
    let vocab = 10;
    let frontend = Frontend {
        table: EmbeddingTable::gaussian(vocab, d, 1.0, seed),
        hard_ids: vec![2, 3],
        mask_id: 1,
        max_input_len: n,
        lift: None,
    };
    let tokens = |r: &mut ChaCha8Rng| (0..n).map(|_| r.random_range(4..vocab)).collect::<Vec<_>>();
    let label = r.random_range(0..classes);
    let source = Example::tokens(tokens(&mut r), Some(label), DomainTag::Source);
    let target = Example::tokens(tokens(&mut r), None, DomainTag::Target);
    let labels = (0..classes).map(|c| format!("c{c}")).collect();
    let normal = Normal::new(0.0, 0.3).unwrap();
    Instance {
        backbone: BackboneWeights::seeded(d, 4 * d, BackboneInit::default(), seed),
        head: VerbalizerHead::seeded(labels, d, 1.0, seed).unwrap(),
        disc: DiscriminatorParams::seeded(d, 1.0, seed),
        prompt: PromptParameters::gaussian(m, d, 1.0, seed),
        source,
        target,
        label,
        delta: Array2::from_shape_fn((n, d), |_| normal.sample(&mut r)),
        frontend,
    }
}

impl Instance {
    fn run(&self, prompt: &PromptParameters, delta: &Array2<f64>) -> ForwardCache {
        let enc = self.frontend.encode(prompt, &self.source).unwrap();
        forward(&enc.perturbed(delta).unwrap(), &self.backbone, &self.head).unwrap()
    }

    fn run_target(&self, prompt: &PromptParameters) -> ForwardCache {
        forward(&self.frontend.encode(prompt, &self.target).unwrap(), &self.backbone, &self.head).unwrap()
    }

    fn zero_delta(&self) -> Array2<f64> {
        Array2::zeros(self.delta.dim())
    }

    fn roles(&self) -> Vec<Role> {
        self.frontend.encode(&self.prompt, &self.source).unwrap().roles
    }

    fn input_rows(&self, g: &Array2<f64>) -> Array2<f64> {
        let enc = self.frontend.encode(&self.prompt, &self.source).unwrap();
        g.slice(s![enc.input_start..enc.input_start + enc.input_slots, ..]).to_owned()
    }
}

/// Central differences of `f` over every entry of `x`.
fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-5;
    let mut g = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let mut plus = x.clone();
        plus[[i, j]] += h;
        let mut minus = x.clone();
        minus[[i, j]] -= h;
        g[[i, j]] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

/// Elementwise relative error with a small absolute floor for entries that
/// vanish analytically.
fn rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn with_prompt(p: &PromptParameters, rows: &Array2<f64>) -> PromptParameters {
    PromptParameters { rows: rows.clone(), ..p.clone() }
}

fn disc_with(d: &DiscriminatorParams, flat: &Array2<f64>) -> DiscriminatorParams {
    let dim = d.dim();
    DiscriminatorParams {
        w: flat.slice(s![..dim, ..]).to_owned(),
        b: flat.row(dim).to_owned(),
    }
}

fn disc_flat(d: &DiscriminatorParams) -> Array2<f64> {
    let mut out = Array2::zeros((d.dim() + 1, 2));
    out.slice_mut(s![..d.dim(), ..]).assign(&d.w);
    out.row_mut(d.dim()).assign(&d.b);
    out
}

fn grad_flat(w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((w.nrows() + 1, 2));
    out.slice_mut(s![..w.nrows(), ..]).assign(w);
    out.row_mut(w.nrows()).assign(b);
    out
}

fn check_instance(inst: &Instance) -> Result<Vec<(&'static str, f64)>, String> {
    let mut out = Vec::new();
    let y = inst.label;
    let roles = inst.roles();
    let p0 = inst.prompt.rows.clone();
    let zero = inst.zero_delta();
    let classes = inst.head.classes();
    let no_logits = Array1::<f64>::zeros(classes);

    // xe w.r.t. prompt and input embeddings (delta = 0 is the input-embedding gradient)
    let clean = inst.run(&inst.prompt, &zero);
    let g = backward(&clean, &inst.backbone, &inst.head, ok(objectives::xent_logit_grad(&clean.prediction, y))?.view(), None, false);
    let xe = |p: &Array2<f64>, d: &Array2<f64>| objectives::xent(&inst.run(&with_prompt(&inst.prompt, p), d).prediction, y).unwrap();
    out.push(("xe/prompt", rel_error(&g.rows_with_role(&roles, Role::Prompt), &numeric_grad(&p0, |p| xe(p, &zero)))));
    out.push(("xe/input", rel_error(&inst.input_rows(&g.input), &numeric_grad(&zero, |d| xe(&p0, d)))));

    // KL(clean || perturbed) with the clean side held fixed
    let pert = inst.run(&inst.prompt, &inst.delta);
    let fixed = clean.prediction.clone();
    let kl = |p: &Array2<f64>, d: &Array2<f64>| {
        objectives::kl_consistency(&fixed, &inst.run(&with_prompt(&inst.prompt, p), d).prediction).unwrap()
    };
    let g = backward(&pert, &inst.backbone, &inst.head, objectives::kl_logit_grad(&fixed, &pert.prediction).view(), None, false);
    out.push(("kl/prompt", rel_error(&g.rows_with_role(&roles, Role::Prompt), &numeric_grad(&p0, |p| kl(p, &inst.delta)))));
    out.push(("kl/delta", rel_error(&inst.input_rows(&g.input), &numeric_grad(&inst.delta, |d| kl(&p0, d)))));

    // adv = -log z(x + delta)
    let adv = |p: &Array2<f64>, d: &Array2<f64>, disc: &DiscriminatorParams| {
        objectives::adv_loss(disc.source_prob(inst.run(&with_prompt(&inst.prompt, p), d).pooled.view()))
    };
    let (gd, d_pooled) = inst.disc.nll_grads(pert.pooled.view(), SOURCE);
    let g = backward(&pert, &inst.backbone, &inst.head, no_logits.view(), Some(d_pooled.view()), false);
    out.push(("adv/delta", rel_error(&inst.input_rows(&g.input), &numeric_grad(&inst.delta, |d| adv(&p0, d, &inst.disc)))));
    out.push(("adv/prompt", rel_error(&g.rows_with_role(&roles, Role::Prompt), &numeric_grad(&p0, |p| adv(p, &inst.delta, &inst.disc)))));
    let theta = disc_flat(&inst.disc);
    out.push((
        "adv/disc",
        rel_error(&grad_flat(&gd.w, &gd.b), &numeric_grad(&theta, |t| adv(&p0, &inst.delta, &disc_with(&inst.disc, t)))),
    ));

    // L_disc for a one-pair batch
    let target = inst.run_target(&inst.prompt);
    let l_disc = |d: &Array2<f64>, disc: &DiscriminatorParams| {
        let zp = disc.source_prob(inst.run(&inst.prompt, d).pooled.view());
        let zc = disc.source_prob(clean.pooled.view());
        let zt = disc.source_prob(target.pooled.view());
        objectives::disc_loss(&[zp], &[zc], &[zt]).unwrap()
    };
    let mut gsum = inst.disc.nll_grads(pert.pooled.view(), SOURCE).0;
    gsum.add_scaled(&inst.disc.nll_grads(clean.pooled.view(), SOURCE).0, 1.0);
    gsum.add_scaled(&inst.disc.nll_grads(target.pooled.view(), TARGET).0, 1.0);
    out.push((
        "disc/theta",
        rel_error(&grad_flat(&gsum.w, &gsum.b), &numeric_grad(&theta, |t| l_disc(&inst.delta, &disc_with(&inst.disc, t)))),
    ));
    out.push(("disc/delta", rel_error(&inst.input_rows(&g.input), &numeric_grad(&inst.delta, |d| l_disc(d, &inst.disc)))));

    // L_R = xe(clean) + KL(clean || perturbed), clean side of KL held fixed
    let g_xe = backward(&clean, &inst.backbone, &inst.head, ok(objectives::xent_logit_grad(&clean.prediction, y))?.view(), None, false);
    let g_kl = backward(&pert, &inst.backbone, &inst.head, objectives::kl_logit_grad(&fixed, &pert.prediction).view(), None, false);
    let analytic = g_xe.rows_with_role(&roles, Role::Prompt) + g_kl.rows_with_role(&roles, Role::Prompt);
    out.push(("l_r/prompt", rel_error(&analytic, &numeric_grad(&p0, |p| xe(p, &zero) + kl(p, &inst.delta)))));
    Ok(out)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..50 {
        for (name, err) in check_instance(&random_instance(1000 + seed))? {
            let e = worst.entry(name).or_insert(0.0);
            *e = e.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (arg, max) = worst.iter().fold(("", 0.0f64), |m, (k, v)| if *v > m.1 { (k, *v) } else { m });
    let detail = format!("max relative error {max:.2e} ({arg}) over 50 instances, {} checks each, {secs:.1}s", worst.len());
    if let Some((name, e)) = worst.iter().find(|(_, e)| **e >= 1e-4) {
        return Err(format!("{name}: relative error {e:.2e}; {detail}"));
    }
    ensure(secs < 60.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

// ------------------------------------------------------------ shared fixtures

struct Fixture {
    model: Model,
    pair: DomainPair,
    train: LabeledSet,
    val: LabeledSet,
}

fn fixture(seed: u64) -> Fixture {
    let spec = DomainPairSpec { seed, ..DomainPairSpec::default() };
    let pair = generate_pair(&spec).unwrap();
    let (train, val) = pair.source.split_validation(0.2).unwrap();
    Fixture {
        model: Model::build(&spec, &ModelConfig::default()).unwrap(),
        pair,
        train,
        val,
    }
}

fn pretrain_run(f: &Fixture, method: Method, config: &TrainConfig, log: &mut dyn FnMut(&StepRecord)) -> optima::trainer::Checkpoint {
    train_method(&f.model, method, config, &f.train, &f.val, Some(&f.pair.target_train), log).unwrap()
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let f = fixture(1);
    let config = TrainConfig::default();
    let (mut violations, mut ascents, mut steps) = (0u64, 0u64, 0u64);
    pretrain_run(&f, Method::Optima, &config, &mut |r| {
        violations += r.ball_violations;
        ascents += r.ascent_calls;
        steps += 1;
    });
    let detail = format!("{steps} steps, {ascents} ascent calls, {violations} violations");
    ensure(steps == config.max_steps && ascents > 0, format!("run incomplete: {detail}"))?;
    ensure(violations == 0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 4

fn trajectory(f: &Fixture, method: Method, config: &TrainConfig, steps: u64) -> Vec<Vec<u64>> {
    let mut state = TrainState::init(&f.model, method, config).unwrap();
    let target = f.pair.target_train.examples();
    let mut out = Vec::new();
    for step in 0..steps {
        let src: Vec<&Example> = batch_indices(f.train.len(), config.batch_size, config.seed, "source-order", step)
            .into_iter()
            .map(|i| &f.train.examples()[i])
            .collect();
        let tgt: Vec<&Example> = if method.uses_target() {
            batch_indices(target.len(), config.batch_size, config.seed, "target-order", step)
                .into_iter()
                .map(|i| &target[i])
                .collect()
        } else {
            Vec::new()
        };
        train_step(&f.model, method, config, &mut state, &src, &tgt).unwrap();
        out.push(state.prompt.rows.iter().map(|v| v.to_bits()).collect());
    }
    out
}

fn criterion_4() -> Outcome {
    let f = fixture(1);
    let base = TrainConfig { max_steps: 200, ..TrainConfig::default() };
    let vat = trajectory(&f, Method::Vat, &base, 200);
    let optima_no_adv = trajectory(&f, Method::Optima, &TrainConfig { adv_weight: 0.0, ..base.clone() }, 200);
    let first_a = vat.iter().zip(&optima_no_adv).position(|(a, b)| a != b);
    ensure(first_a.is_none(), format!("(a) VAT and adv-weight-0 OPTIMA diverge at step {first_a:?}"))?;
    let pt = trajectory(&f, Method::Pt, &base, 200);
    let collapsed = TrainConfig { ascent_steps: 0, epsilon: 0.0, ..base.clone() };
    let optima_collapsed = trajectory(&f, Method::Optima, &collapsed, 200);
    let first_b = pt.iter().zip(&optima_collapsed).position(|(a, b)| a != b);
    ensure(first_b.is_none(), format!("(b) PT and K=0/eps=0 OPTIMA diverge at step {first_b:?}"))?;
    ensure(vat[199] != pt[199], "trajectories are trivially identical")?;
    Ok("200-step prompt trajectories bitwise equal for (a) VAT vs OPTIMA adv 0 and (b) PT vs OPTIMA K=0, eps=0".into())
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let spec = DomainPairSpec { n_source: 400, n_target: 400, n_eval: 60, ..DomainPairSpec::default() };
    let pair = generate_pair(&spec).unwrap();
    let (mut optima_zero, mut dann_nonzero) = (0, 0);
    let mut max_optima: f64 = 0.0;
    for i in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(5000 + i);
        let model_cfg = ModelConfig { dim: [4, 8, 16][i as usize % 3], hidden: 32, seed: 100 + i, ..ModelConfig::default() };
        let model = Model::build(&spec, &model_cfg).unwrap();
        let config = TrainConfig {
            seed: i,
            prompt_init: optima::model::PromptInit::Gaussian,
            adv_weight: r.random_range(0.5..3.0),
            ..TrainConfig::default()
        };
        let b = r.random_range(1..=4);
        let src: Vec<&Example> = (0..b).map(|_| &pair.source.examples()[r.random_range(0..400)]).collect();
        let tgt: Vec<&Example> = (0..b).map(|_| &pair.target_train.examples()[r.random_range(0..400)]).collect();
        let disc = DiscriminatorParams::seeded(model.dim(), 2.0, 9000 + i);
        for method in [Method::Optima, Method::Dann] {
            let mut state = TrainState::init(&model, method, &config).unwrap();
            state.disc = Some(disc.clone());
            let pass = compute_pass(&model, method, &config, &state, &src, &tgt, LossTerms::DOMAIN_ONLY).unwrap();
            let norm = pass.prompt.iter().map(|v| v * v).sum::<f64>().sqrt();
            match method {
                Method::Optima => {
                    ensure(pass.disc.is_some(), "OPTIMA pass produced no discriminator gradient")?;
                    max_optima = max_optima.max(pass.prompt.iter().fold(0.0, |m, v| m.max(v.abs())));
                    if pass.prompt.iter().all(|v| *v == 0.0) {
                        optima_zero += 1;
                    }
                }
                _ => {
                    if norm > 0.0 {
                        dann_nonzero += 1;
                    }
                }
            }
        }
    }
    let detail = format!("OPTIMA prompt gradient exactly zero on {optima_zero}/100 (max |g| {max_optima:.1e}); DANN nonzero on {dann_nonzero}/100");
    ensure(optima_zero == 100 && dann_nonzero >= 95, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let f = fixture(seed);
        let config = TrainConfig { seed, ..TrainConfig::default() };
        let mut acc = Vec::new();
        for method in [Method::Pt, Method::Vat, Method::Optima] {
            let ckpt = pretrain_run(&f, method, &config, &mut |_| {});
            let best = ckpt.best.as_ref().unwrap();
            acc.push(selection_metric(&f.model, &best.prompt, best.backbone(&f.model), &f.pair.target_eval, Selection::Accuracy).unwrap());
        }
        rows.push((seed, acc[0], acc[1], acc[2]));
    }
    let wins = rows.iter().filter(|r| r.3 > r.1).count();
    let mean = |k: usize| rows.iter().map(|r| [r.1, r.2, r.3][k]).sum::<f64>() / rows.len() as f64;
    let (pt, vat, opt) = (mean(0), mean(1), mean(2));
    let margin = 100.0 * (opt - pt);
    let secs = start.elapsed().as_secs_f64();
    let per_seed: Vec<String> = rows.iter().map(|r| format!("s{}: pt {:.3} vat {:.3} optima {:.3}", r.0, r.1, r.2, r.3)).collect();
    let detail = format!(
        "OPTIMA > PT on {wins}/5 seeds, mean margin {margin:.2} pts, means pt {pt:.4} vat {vat:.4} optima {opt:.4}, {secs:.0}s [{}]",
        per_seed.join("; ")
    );
    ensure(wins >= 4 && margin >= 3.0 && opt >= vat && secs < 600.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------- CLI helpers (7, 9)

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["optima"];
    argv.extend_from_slice(args);
    let code = optima::cli::run(argv.iter().map(|s| s.to_string()));
    ensure(code == 0, format!("`optima {}` exited with {code}", args.join(" ")))
}

fn pipeline(dir: &Path, method: &str, overrides: &[&str]) -> Result<(), String> {
    let run_dir = dir.to_str().unwrap();
    for cmd in ["generate-data", "pretrain", "fewshot", "report"] {
        let mut args = vec![cmd, "--run-dir", run_dir];
        if matches!(cmd, "pretrain" | "fewshot") {
            args.extend(["--method", method]);
        }
        for o in overrides {
            args.extend(["--set", o]);
        }
        cli(&args)?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("run");
    pipeline(&dir, "optima", &["train.max_steps=40"])?;

    let mut splits = 0;
    for k in 0..16 {
        let load = |part: &str| {
            optima::data::load_jsonl(&dir.join(format!("data/splits/split-{k:02}-{part}.jsonl")), &DomainPairSpec::default().label_names())
                .unwrap()
                .examples
        };
        let (train, dev) = (load("train"), load("dev"));
        for set in [&train, &dev] {
            let mut counts = [0usize; 3];
            for e in set {
                counts[e.label.unwrap()] += 1;
            }
            ensure(counts == [8, 8, 8], format!("split {k} class counts {counts:?}"))?;
        }
        let overlap = train.iter().filter(|e| dev.contains(e)).count();
        ensure(overlap == 0, format!("split {k}: {overlap} examples in both train and dev"))?;
        splits += 1;
    }

    let mut reports: Vec<RunReport> = fs::read_dir(dir.join("reports/few-shot"))
        .unwrap()
        .map(|e| read_json(&e.unwrap().path()))
        .collect();
    reports.sort_by_key(|r| (r.sample_index, r.seed));
    ensure(reports.len() == 48, format!("{} few-shot reports", reports.len()))?;
    let mut cells: BTreeMap<(usize, u64), usize> = BTreeMap::new();
    for r in &reports {
        *cells.entry((r.sample_index.unwrap(), r.seed)).or_default() += 1;
    }
    ensure(cells.len() == 48 && cells.values().all(|c| *c == 1), "reports do not cover 16 splits x 3 seeds once each")?;

    // seed-first oracle: average seeds within a split, then mean/std over splits
    let split_means: Vec<f64> = (0..16)
        .map(|k| reports.iter().filter(|r| r.sample_index == Some(k)).map(|r| r.metrics.accuracy).sum::<f64>() / 3.0)
        .collect();
    let mean = split_means.iter().sum::<f64>() / 16.0;
    let std = (split_means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0).sqrt();
    let agg: AggregateReport = read_json(&dir.join("reports/aggregate-few-shot.json"));
    let s = &agg.methods[0];
    ensure(agg.complete && s.complete && agg.run_count == 48 && s.runs == 48 && s.units == 16, "aggregate not complete over 48 runs / 16 units")?;
    ensure(
        (s.accuracy_mean - mean).abs() < 1e-12 && (s.accuracy_std - std).abs() < 1e-12,
        format!("aggregate {:.6}±{:.6} vs seed-first oracle {mean:.6}±{std:.6}", s.accuracy_mean, s.accuracy_std),
    )?;
    Ok(format!(
        "48 reports (16 splits x 3 seeds), {splits} splits of 8+8 per class, seed-first aggregate {:.4}±{:.4}",
        s.accuracy_mean, s.accuracy_std
    ))
}

// ---------------------------------------------------------------- criterion 8

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Two-sided p-value `1 - 2 * int_0^|t| pdf`, composite Simpson rule.
fn p_by_quadrature(t: f64, df: f64) -> f64 {
    let log_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (log_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let n = 200_000;
    let h = t.abs() / n as f64;
    let mut sum = pdf(0.0) + pdf(t.abs());
    for k in 1..n {
        sum += if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(k as f64 * h);
    }
    (1.0 - 2.0 * sum * h / 3.0).max(0.0)
}

fn criterion_8() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(88);
    let (mut worst_t, mut worst_p): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let (na, nb) = (r.random_range(2..=15), r.random_range(2..=15));
        let da = Normal::new(r.random_range(-1.0..1.0), r.random_range(0.2..2.0)).unwrap();
        let db = Normal::new(r.random_range(-1.0..1.0), r.random_range(0.2..2.0)).unwrap();
        let a: Vec<f64> = (0..na).map(|_| da.sample(&mut r)).collect();
        let b: Vec<f64> = (0..nb).map(|_| db.sample(&mut r)).collect();
        let moments = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
        };
        let ((ma, va), (mb, vb)) = (moments(&a), moments(&b));
        let (qa, qb) = (va / na as f64, vb / nb as f64);
        let t = (ma - mb) / (qa + qb).sqrt();
        let df = (qa + qb).powi(2) / (qa * qa / (na as f64 - 1.0) + qb * qb / (nb as f64 - 1.0));
        let got = ok(ttest(&a, &b, TTestKind::Welch))?;
        worst_t = worst_t.max((got.t - t).abs());
        worst_p = worst_p.max((got.p - p_by_quadrature(t, df)).abs());
    }
    ensure(worst_t <= 1e-6 && worst_p <= 1e-6, format!("t err {worst_t:.2e}, p err {worst_p:.2e}"))?;

    let mut exact = 0;
    for _ in 0..20 {
        let classes = r.random_range(2..=4);
        let n = r.random_range(5..80);
        let gold: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let m = ok(compute_metrics(&pred, &gold, classes))?;
        let hits = pred.iter().zip(&gold).filter(|(p, g)| p == g).count();
        let mut f1s = Vec::new();
        for c in 0..classes {
            let tp = (0..n).filter(|&i| pred[i] == c && gold[i] == c).count();
            let fp = (0..n).filter(|&i| pred[i] == c && gold[i] != c).count();
            let fn_ = (0..n).filter(|&i| pred[i] != c && gold[i] == c).count();
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            let pc = &m.per_class[c];
            ensure(pc.precision == precision && pc.recall == recall && pc.f1 == f1, format!("class {c} metrics differ"))?;
            ensure(pc.support as usize == tp + fn_, "support differs")?;
            for g in 0..classes {
                let count = (0..n).filter(|&i| gold[i] == g && pred[i] == c).count();
                ensure(m.confusion[g][c] as usize == count, "confusion cell differs")?;
            }
            f1s.push(f1);
        }
        let f1 = if classes == 2 { f1s[1] } else { f1s.iter().sum::<f64>() / classes as f64 };
        ensure(m.accuracy == hits as f64 / n as f64 && m.f1 == f1, "accuracy or F1 differs")?;
        exact += 1;
    }
    Ok(format!("t-test vs quadrature: t err {worst_t:.1e}, p err {worst_p:.1e} (20 pairs); metrics exact on {exact}/20 sets"))
}

// ---------------------------------------------------------------- criterion 9

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, "optima", &[])?;
    pipeline(&b, "optima", &[])?;
    let (ta, tb) = (tree(&a.join("reports")), tree(&b.join("reports")));
    ensure(ta.len() > 48, format!("only {} report files", ta.len()))?;
    ensure(ta.keys().eq(tb.keys()), "report file sets differ")?;
    let differing: Vec<&String> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), format!("{} files differ, e.g. {:?}", differing.len(), differing.first()))?;
    let (da, db) = (tree(&a.join("data")), tree(&b.join("data")));
    ensure(da == db, "data artifacts differ")?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 900.0, format!("too slow: {secs:.0}s"))?;
    Ok(format!("{} report files byte-identical across two default runs, {secs:.0}s", ta.len()))
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let spec = DomainPairSpec { n_source: 300, n_target: 300, n_eval: 60, ..DomainPairSpec::default() };
    let pair = generate_pair(&spec).unwrap();
    let (train, val) = pair.source.split_validation(0.2).unwrap();
    let model = Model::build(&spec, &ModelConfig::default()).unwrap();
    let before = model.backbone.digest();
    let split = optima::data::sample_fewshot(&pair.target_pool(), 3, 0, 1).unwrap();
    let config = TrainConfig { max_steps: 30, eval_interval: 10, ..TrainConfig::default() };
    let few = TrainConfig { max_steps: 12, ..TrainConfig::fewshot() };
    let mut lines = Vec::new();
    for method in Method::ALL {
        let ckpt = train_method(&model, method, &config, &train, &val, Some(&pair.target_train), &mut |_| {}).unwrap();
        let start = fewshot_start(&model, method, Some(&ckpt), &few).unwrap();
        let tuned = fewshot_finetune(&model, method, &start, &split.train, &split.dev, &few, &mut |_| {}).unwrap();
        let pre = ckpt.state.backbone(&model).digest();
        let post = tuned.state.backbone(&model).digest();
        ensure(model.backbone.digest() == before, format!("{method}: model weights mutated"))?;
        if method.trains_backbone() {
            ensure(pre != before && post != before, format!("{method}: backbone did not change"))?;
            lines.push(format!("{method} changed"));
        } else {
            ensure(pre == before && post == before, format!("{method}: frozen backbone digest changed"))?;
            ensure(ckpt.state.backbone.is_none(), format!("{method}: holds a trainable backbone copy"))?;
        }
    }
    Ok(format!("digest {}... constant for frozen/prompt modes; {}", &before[..12], lines.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("projection correctness", criterion_1),
        ("gradient fidelity", criterion_2),
        ("ball invariant", criterion_3),
        ("ablation identities", criterion_4),
        ("gradient-isolation contrast", criterion_5),
        ("directional domain-adaptation result", criterion_6),
        ("protocol fidelity", criterion_7),
        ("statistical oracle", criterion_8),
        ("determinism", criterion_9),
        ("frozen contract", criterion_10),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
