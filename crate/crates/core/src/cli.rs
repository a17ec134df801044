//! Command-line pipeline. Every subcommand resolves the configuration, opens
//! (or creates) the run directory, writes `manifest.json`, and only then
//! computes. Exit codes: 0 success, 1 runtime failure, 2 config or usage
//! error; failures print one JSON object on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::baselines::{evaluate_checkpoint, fewshot_start, train_method, MethodSpec, FewshotStart};
use crate::config::ExperimentConfig;
use crate::data::{generate_pair, load_jsonl, sample_fewshot, write_jsonl, LabeledSet, TaskKind, UnlabeledSet};
use crate::embedding::{DomainTag, Example, Input};
use crate::error::{Error, Result};
use crate::eval::{aggregate, tfidf_class_similarity, RunReport, Setting};
use crate::model::Model;
use crate::plot::{decision_regions, heatmap, line_chart, ScatterPoint, Series};
use crate::trainer::{fewshot_finetune, predict, Checkpoint, Method, StepRecord, TrainConfig};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "optima", version, about = "Domain-adaptive soft-prompt tuning laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.epsilon=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory; defaults to `<runs-root>/<config hash>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the domain pair and the few-shot splits.
    GenerateData(Common),
    /// Train a method on the source domain for every protocol seed.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
    },
    /// Run the few-shot protocol (every split crossed with every seed).
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
    },
    /// Zero-shot evaluation of pretrained checkpoints on the target test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
    },
    /// Class-level TF-IDF similarity and summed confusion matrices.
    Analyze(Common),
    /// Aggregate run reports of one setting.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "few-shot")]
        setting: String,
    },
    /// SVG heatmaps, learning curves, and toy2d decision regions.
    Plot(Common),
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim_end()}));
            return 2;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: &Command) -> Result<Value> {
    match command {
        Command::GenerateData(c) => generate_data(&open_run(c)?),
        Command::Pretrain { common, method } => {
            let method = method.parse()?;
            run_pretrain(&open_run(common)?, method)
        }
        Command::Fewshot { common, method } => {
            let method = method.parse()?;
            run_fewshot(&open_run(common)?, method)
        }
        Command::Evaluate { common, method } => {
            let method = method.parse()?;
            run_evaluate(&open_run(common)?, method)
        }
        Command::Analyze(c) => run_analyze(&open_run(c)?),
        Command::Report { common, setting } => {
            let setting = parse_setting(setting)?;
            run_report(&open_run(common)?, setting)
        }
        Command::Plot(c) => run_plot(&open_run(c)?),
    }
}

fn parse_setting(s: &str) -> Result<Setting> {
    match s {
        "few-shot" => Ok(Setting::FewShot),
        "zero-shot" => Ok(Setting::ZeroShot),
        _ => Err(Error::config(format!("unknown setting `{s}`; valid: few-shot, zero-shot"))),
    }
}

fn setting_dir(setting: Setting) -> &'static str {
    match setting {
        Setting::FewShot => "few-shot",
        Setting::ZeroShot => "zero-shot",
    }
}

pub struct Run {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub hash: String,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn model(&self) -> Result<Model> {
        Model::build(&self.config.data, &self.config.model)
    }

    fn labels(&self) -> Vec<String> {
        self.config.data.label_names()
    }

    fn load_labeled(&self, rel: &str) -> Result<LabeledSet> {
        LabeledSet::new(self.load_examples(rel)?)
    }

    fn load_unlabeled(&self, rel: &str) -> Result<UnlabeledSet> {
        UnlabeledSet::new(self.load_examples(rel)?)
    }

    fn load_examples(&self, rel: &str) -> Result<Vec<Example>> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::input(format!("{} is missing; run generate-data first", path.display())));
        }
        Ok(load_jsonl(&path, &self.labels())?.examples)
    }

    fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..base.clone() }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Files in `dir` with the given extension, sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn write_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Resolve the configuration and prepare the run directory and manifest.
pub fn open_run(common: &Common) -> Result<Run> {
    let config = ExperimentConfig::resolve(common.config.as_deref(), &common.overrides)?;
    let hash = config.hash()?;
    let root = common.run_dir.clone().unwrap_or_else(|| common.runs_root.join(&hash));
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        let existing: Value = read_json(&manifest_path)?;
        let found = existing.get("config_hash").and_then(Value::as_str).unwrap_or("");
        if found != hash {
            return Err(Error::config(format!(
                "{} belongs to config {found}, not {hash}; use another --run-dir",
                root.display()
            )));
        }
    }
    for sub in ["data", "checkpoints", "reports", "plots"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let manifest = json!({
        "format": MANIFEST_FORMAT,
        "config_hash": hash,
        "seeds": config.protocol.seeds,
        "data_seed": config.data.seed,
        "model_seed": config.model.seed,
        "versions": {"optima": env!("CARGO_PKG_VERSION")},
        "config": serde_json::to_value(&config)?,
    });
    write_json(&manifest_path, &manifest)?;
    Ok(Run { root, config, hash })
}

fn split_name(k: usize, part: &str) -> String {
    format!("data/splits/split-{k:02}-{part}.jsonl")
}

fn generate_data(run: &Run) -> Result<Value> {
    let pair = generate_pair(&run.config.data)?;
    let labels = run.labels();
    write_jsonl(&run.path("data/source.jsonl"), pair.source.examples(), &labels)?;
    write_jsonl(&run.path("data/target_unlabeled.jsonl"), pair.target_train.examples(), &labels)?;
    let pool = pair.target_pool();
    write_jsonl(&run.path("data/target_pool.jsonl"), pool.examples(), &labels)?;
    write_jsonl(&run.path("data/target_eval.jsonl"), pair.target_eval.examples(), &labels)?;
    fs::create_dir_all(run.path("data/splits")).map_err(|e| Error::io(run.path("data/splits"), e))?;
    let classes = run.config.data.classes;
    for k in 0..run.config.protocol.splits {
        let split = sample_fewshot(&pool, classes, k, run.config.protocol.split_seed)?;
        write_jsonl(&run.path(&split_name(k, "train")), split.train.examples(), &labels)?;
        write_jsonl(&run.path(&split_name(k, "dev")), split.dev.examples(), &labels)?;
    }
    let model = run.model()?;
    model.snapshot(run.config.model.seed).save(&run.path("checkpoints/backbone.json"))?;
    Ok(json!({
        "command": "generate-data",
        "run_dir": run.root,
        "config_hash": run.hash,
        "source": pair.source.len(),
        "target_unlabeled": pair.target_train.len(),
        "target_eval": pair.target_eval.len(),
        "splits": run.config.protocol.splits,
        "backbone_digest": model.backbone.digest(),
    }))
}

fn pretrain_name(method: Method, seed: u64) -> String {
    format!("pretrain-{method}-seed{seed}")
}

fn run_pretrain(run: &Run, method: Method) -> Result<Value> {
    let model = run.model()?;
    let source = run.load_labeled("data/source.jsonl")?;
    let (train, val) = source.split_validation(run.config.protocol.source_val_fraction)?;
    let target = if method.uses_target() {
        Some(run.load_unlabeled("data/target_unlabeled.jsonl")?)
    } else {
        None
    };
    let seeds = run.config.protocol.seeds.clone();
    let results: Vec<Result<(u64, Checkpoint)>> = seeds
        .par_iter()
        .map(|seed| {
            let config = run.train_config(&run.config.train, *seed);
            let mut records = Vec::new();
            let ckpt = train_method(&model, method, &config, &train, &val, target.as_ref(), &mut |r| {
                records.push(r.clone())
            })?;
            let name = pretrain_name(method, *seed);
            ckpt.save(&run.path(&format!("checkpoints/{name}.json")))?;
            write_log(&run.path(&format!("reports/logs/{name}.jsonl")), &records)?;
            Ok((*seed, ckpt))
        })
        .collect();
    let mut runs = Vec::new();
    for r in results {
        let (seed, ckpt) = r?;
        let best = ckpt.best.as_ref();
        runs.push(json!({
            "seed": seed,
            "steps": ckpt.state.step,
            "best_step": best.map(|b| b.step),
            "source_val": best.map(|b| b.metric),
        }));
    }
    Ok(json!({"command": "pretrain", "method": method, "run_dir": run.root, "config_hash": run.hash, "runs": runs}))
}

fn load_pretrained(run: &Run, method: Method, seed: u64) -> Result<Checkpoint> {
    let path = run.path(&format!("checkpoints/{}.json", pretrain_name(method, seed)));
    if !path.exists() {
        return Err(Error::input(format!(
            "{} is missing; run `pretrain --method {method}` first",
            path.display()
        )));
    }
    Checkpoint::load(&path)
}

fn report_for(
    run: &Run,
    method: Method,
    setting: Setting,
    seed: u64,
    sample_index: Option<usize>,
    model: &Model,
    ckpt: &Checkpoint,
    eval: &LabeledSet,
) -> Result<RunReport> {
    let (preds, metrics) = evaluate_checkpoint(model, ckpt, eval)?;
    let stem = match sample_index {
        Some(k) => format!("{method}-split{k:02}-seed{seed}"),
        None => format!("{method}-seed{seed}"),
    };
    let pred_rel = format!("reports/predictions/{}-{stem}.json", setting_dir(setting));
    write_json(&run.path(&pred_rel), &preds)?;
    let report = RunReport {
        method,
        setting,
        config_hash: run.hash.clone(),
        seed,
        sample_index,
        metrics,
        predictions_ref: Some(pred_rel),
    };
    write_json(&run.path(&format!("reports/{}/{stem}.json", setting_dir(setting))), &report)?;
    Ok(report)
}

fn run_fewshot(run: &Run, method: Method) -> Result<Value> {
    let model = run.model()?;
    let eval = run.load_labeled("data/target_eval.jsonl")?;
    let seeds = run.config.protocol.seeds.clone();
    let splits = run.config.protocol.splits;
    let mut starts = Vec::new();
    for seed in &seeds {
        let pretrained = match MethodSpec::of(method).fewshot_start {
            FewshotStart::Pretrained => Some(load_pretrained(run, method, *seed)?),
            FewshotStart::Initialization => None,
        };
        let config = run.train_config(&run.config.train, *seed);
        starts.push(fewshot_start(&model, method, pretrained.as_ref(), &config)?);
    }
    let mut split_sets = Vec::new();
    for k in 0..splits {
        let train = run.load_labeled(&split_name(k, "train"))?;
        let dev = run.load_labeled(&split_name(k, "dev"))?;
        split_sets.push((train, dev));
    }
    let jobs: Vec<(usize, usize)> = (0..splits).flat_map(|k| (0..seeds.len()).map(move |s| (k, s))).collect();
    let reports: Vec<Result<RunReport>> = jobs
        .par_iter()
        .map(|(k, s)| {
            let seed = seeds[*s];
            let config = run.train_config(&run.config.fewshot, seed);
            let (train, dev) = &split_sets[*k];
            let mut records = Vec::new();
            let ckpt = fewshot_finetune(&model, method, &starts[*s], train, dev, &config, &mut |r| {
                records.push(r.clone())
            })?;
            write_log(
                &run.path(&format!("reports/logs/fewshot-{method}-split{k:02}-seed{seed}.jsonl")),
                &records,
            )?;
            report_for(run, method, Setting::FewShot, seed, Some(*k), &model, &ckpt, &eval)
        })
        .collect();
    let reports: Vec<RunReport> = reports.into_iter().collect::<Result<_>>()?;
    let accuracy: Vec<f64> = reports.iter().map(|r| r.metrics.accuracy).collect();
    let (mean, std) = crate::eval::mean_std(&accuracy);
    Ok(json!({
        "command": "fewshot",
        "method": method,
        "run_dir": run.root,
        "config_hash": run.hash,
        "reports": reports.len(),
        "accuracy_mean": mean,
        "accuracy_std": std,
    }))
}

fn run_evaluate(run: &Run, method: Method) -> Result<Value> {
    let model = run.model()?;
    let eval = run.load_labeled("data/target_eval.jsonl")?;
    let mut out = Vec::new();
    for seed in run.config.protocol.seeds.clone() {
        let path = run.path(&format!("checkpoints/{}.json", pretrain_name(method, seed)));
        let ckpt = if path.exists() || method != Method::Frozen {
            load_pretrained(run, method, seed)?
        } else {
            Checkpoint::initial(&model, method, &run.train_config(&run.config.train, seed))?
        };
        let report = report_for(run, method, Setting::ZeroShot, seed, None, &model, &ckpt, &eval)?;
        out.push(json!({"seed": seed, "accuracy": report.metrics.accuracy, "f1": report.metrics.f1}));
    }
    Ok(json!({"command": "evaluate", "method": method, "run_dir": run.root, "config_hash": run.hash, "runs": out}))
}

fn load_reports(run: &Run, setting: Setting) -> Result<Vec<RunReport>> {
    list_files(&run.path(&format!("reports/{}", setting_dir(setting))), "json")?
        .iter()
        .map(|p| read_json(p))
        .collect()
}

fn run_report(run: &Run, setting: Setting) -> Result<Value> {
    let reports = load_reports(run, setting)?;
    if reports.is_empty() {
        return Err(Error::input(format!(
            "no {} reports in {}",
            setting_dir(setting),
            run.root.display()
        )));
    }
    let agg = aggregate(&reports, setting, run.config.protocol.reference, run.config.protocol.ttest)?;
    let stem = format!("reports/aggregate-{}", setting_dir(setting));
    write_json(&run.path(&format!("{stem}.json")), &agg)?;
    write_text(&run.path(&format!("{stem}.csv")), &agg.to_csv())?;
    Ok(json!({"command": "report", "run_dir": run.root, "config_hash": run.hash, "aggregate": agg}))
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
struct Matrix {
    title: String,
    rows: Vec<String>,
    cols: Vec<String>,
    values: Vec<Vec<f64>>,
}

fn class_documents(set: &LabeledSet, classes: usize) -> Vec<Vec<Vec<usize>>> {
    let mut docs = vec![Vec::new(); classes];
    for e in set.examples() {
        if let (Input::Tokens(t), Some(y)) = (&e.input, e.label) {
            docs[y].push(t.clone());
        }
    }
    docs
}

fn run_analyze(run: &Run) -> Result<Value> {
    let labels = run.labels();
    let classes = labels.len();
    let mut written = Vec::new();
    if run.config.data.task == TaskKind::TokenStats {
        let source = class_documents(&run.load_labeled("data/source.jsonl")?, classes);
        let target = class_documents(&run.load_labeled("data/target_pool.jsonl")?, classes);
        let tag = |prefix: &str| labels.iter().map(|l| format!("{prefix}:{l}")).collect::<Vec<_>>();
        for (name, a, b, ra, rb) in [
            ("source-target", &source, &target, "source", "target"),
            ("source-source", &source, &source, "source", "source"),
        ] {
            let m = Matrix {
                title: format!("TF-IDF class similarity ({ra} vs {rb})"),
                rows: tag(ra),
                cols: tag(rb),
                values: tfidf_class_similarity(a, b)?,
            };
            let rel = format!("reports/analysis/tfidf-{name}.json");
            write_json(&run.path(&rel), &m)?;
            written.push(rel);
        }
    }
    for setting in [Setting::ZeroShot, Setting::FewShot] {
        let reports = load_reports(run, setting)?;
        let mut methods: Vec<Method> = reports.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        for method in methods {
            let mut sum = vec![vec![0.0; classes]; classes];
            for r in reports.iter().filter(|r| r.method == method) {
                for (i, row) in r.metrics.confusion.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        sum[i][j] += *v as f64;
                    }
                }
            }
            let m = Matrix {
                title: format!("Confusion, {method}, {} (gold rows, predicted columns)", setting_dir(setting)),
                rows: labels.clone(),
                cols: labels.clone(),
                values: sum,
            };
            let rel = format!("reports/analysis/confusion-{}-{method}.json", setting_dir(setting));
            write_json(&run.path(&rel), &m)?;
            written.push(rel);
        }
    }
    Ok(json!({"command": "analyze", "run_dir": run.root, "config_hash": run.hash, "written": written}))
}

/// Argmax class over a `grid x grid` lattice of cell centres spanning
/// `[-extent, extent]^2`; row 0 is the top (largest y).
pub fn decision_grid(model: &Model, ckpt: &Checkpoint, grid: usize, extent: f64) -> Result<Vec<Vec<usize>>> {
    let step = 2.0 * extent / grid as f64;
    let centre = |k: usize| -extent + (k as f64 + 0.5) * step;
    let points: Vec<Example> = (0..grid)
        .flat_map(|i| (0..grid).map(move |j| (i, j)))
        .map(|(i, j)| Example::point([centre(j), centre(grid - 1 - i)], None, DomainTag::Source))
        .collect();
    let preds = predict(model, ckpt.best_prompt(), ckpt.best_backbone(model), &points)?;
    Ok(preds.chunks(grid).map(|row| row.iter().map(|p| p.argmax()).collect()).collect())
}

fn run_plot(run: &Run) -> Result<Value> {
    let mut written = Vec::new();
    let mut emit = |name: String, svg: String| -> Result<()> {
        let rel = format!("plots/{name}.svg");
        write_text(&run.path(&rel), &svg)?;
        written.push(rel);
        Ok(())
    };
    for path in list_files(&run.path("reports/analysis"), "json")? {
        let m: Matrix = read_json(&path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix").to_string();
        emit(stem, heatmap(&m.values, &m.rows, &m.cols, &m.title))?;
    }
    for path in list_files(&run.path("reports/logs"), "jsonl")? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("log").to_string();
        if !stem.starts_with("pretrain-") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records: Vec<StepRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let objective = Series {
            name: "objective".into(),
            points: records.iter().map(|r| (r.step as f64 + 1.0, r.objective)).collect(),
        };
        let xe = Series {
            name: "xe".into(),
            points: records.iter().map(|r| (r.step as f64 + 1.0, r.xe)).collect(),
        };
        let val = Series {
            name: "val metric".into(),
            points: records
                .iter()
                .filter_map(|r| r.val_metric.map(|v| (r.step as f64 + 1.0, v)))
                .collect(),
        };
        emit(format!("curve-{stem}"), line_chart(&[objective, xe], &stem, "step", "loss"))?;
        emit(format!("val-{stem}"), line_chart(&[val], &stem, "step", "validation metric"))?;
    }
    if run.config.data.task == TaskKind::Toy2d {
        let model = run.model()?;
        let source = run.load_labeled("data/source.jsonl")?;
        let target = run.load_labeled("data/target_eval.jsonl")?;
        let points: Vec<ScatterPoint> = source
            .examples()
            .iter()
            .chain(target.examples())
            .filter_map(|e| match (&e.input, e.label) {
                (Input::Point(p), Some(y)) => Some(ScatterPoint {
                    x: p[0],
                    y: p[1],
                    class: y,
                    hollow: e.domain == DomainTag::Target,
                }),
                _ => None,
            })
            .collect();
        for path in list_files(&run.path("checkpoints"), "json")? {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            if !stem.starts_with("pretrain-") {
                continue;
            }
            let ckpt = Checkpoint::load(&path)?;
            let grid = decision_grid(&model, &ckpt, run.config.plot.grid, run.config.plot.extent)?;
            emit(
                format!("boundary-{stem}"),
                decision_regions(&grid, run.config.plot.extent, &points, &format!("Decision regions, {stem}")),
            )?;
        }
    }
    Ok(json!({"command": "plot", "run_dir": run.root, "config_hash": run.hash, "written": written}))
}
