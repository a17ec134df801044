//! Classification metrics, two-sample t-tests, TF-IDF class similarity, and
//! aggregation of run reports into per-method summaries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::trainer::Method;

pub const FEWSHOT_SPLITS: usize = 16;
pub const PRETRAIN_SEEDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Kind {
    /// F1 of the positive class (two-class tasks).
    Binary,
    /// Unweighted mean of per-class F1.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub f1_kind: F1Kind,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Index of the positive class for two-class F1 (`Yes` in `No/Yes`).
pub const POSITIVE_CLASS: usize = 1;

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(predictions: &[usize], gold: &[usize], classes: usize) -> Result<Metrics> {
    if predictions.len() != gold.len() {
        return Err(Error::input(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if classes < 2 {
        return Err(Error::input("metrics need at least two classes"));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (p, g) in predictions.iter().zip(gold) {
        if *p >= classes || *g >= classes {
            return Err(Error::input(format!("label out of range for {classes} classes")));
        }
        confusion[*g][*p] += 1;
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = (0..classes).map(|g| confusion[g][c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            }
        })
        .collect();
    let (f1, f1_kind) = if classes == 2 {
        (per_class[POSITIVE_CLASS].f1, F1Kind::Binary)
    } else {
        (per_class.iter().map(|m| m.f1).sum::<f64>() / classes as f64, F1Kind::Macro)
    };
    Ok(Metrics {
        accuracy: ratio(trace, total),
        f1,
        f1_kind,
        per_class,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub setting: Setting,
    pub config_hash: String,
    pub seed: u64,
    pub sample_index: Option<usize>,
    pub metrics: Metrics,
    pub predictions_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestKind {
    Welch,
    Pooled,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn two_sided(t: f64, df: f64, mean_diff: f64) -> Result<TTest> {
    if !t.is_finite() || !(df > 0.0) {
        // zero standard error: the means either coincide or differ exactly
        let p = if mean_diff == 0.0 { 1.0 } else { 0.0 };
        let t = if mean_diff == 0.0 { 0.0 } else { mean_diff.signum() * f64::INFINITY };
        return Ok(TTest { t, p, df });
    }
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::numerical("t-test", e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

/// Two-sided two-sample t-test.
pub fn ttest(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::input("t-test needs at least two values per sample"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (va, vb) = (sa * sa, sb * sb);
    let diff = ma - mb;
    match kind {
        TTestKind::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se = (qa + qb).sqrt();
            let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
            if se == 0.0 {
                return two_sided(f64::NAN, f64::NAN, diff);
            }
            two_sided(diff / se, df, diff)
        }
        TTestKind::Pooled => {
            let df = na + nb - 2.0;
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            let se = (sp2 * (1.0 / na + 1.0 / nb)).sqrt();
            if se == 0.0 {
                return two_sided(f64::NAN, df, diff);
            }
            two_sided(diff / se, df, diff)
        }
        TTestKind::Paired => {
            if a.len() != b.len() {
                return Err(Error::input("paired t-test needs equal-length samples"));
            }
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let (md, sd) = mean_std(&d);
            let se = sd / na.sqrt();
            if se == 0.0 {
                return two_sided(f64::NAN, na - 1.0, md);
            }
            two_sided(md / se, na - 1.0, md)
        }
    }
}

/// Cosine similarity between class documents of two corpora. Each class's
/// sequences form one document; weights are raw term counts times the
/// smoothed IDF `ln((1 + N) / (1 + df)) + 1` over all `N` documents, and
/// each vector is L2-normalized. Entry `[i][j]` compares class `i` of
/// `corpus_a` with class `j` of `corpus_b`.
pub fn tfidf_class_similarity<T: Ord + Clone>(
    corpus_a: &[Vec<Vec<T>>],
    corpus_b: &[Vec<Vec<T>>],
) -> Result<Vec<Vec<f64>>> {
    let docs: Vec<BTreeMap<T, f64>> = corpus_a
        .iter()
        .chain(corpus_b)
        .enumerate()
        .map(|(i, class)| {
            let mut counts = BTreeMap::new();
            for tok in class.iter().flatten() {
                *counts.entry(tok.clone()).or_insert(0.0) += 1.0;
            }
            if counts.is_empty() {
                Err(Error::input(format!("class document {i} is empty")))
            } else {
                Ok(counts)
            }
        })
        .collect::<Result<_>>()?;
    let n = docs.len() as f64;
    let mut df: BTreeMap<&T, f64> = BTreeMap::new();
    for doc in &docs {
        for term in doc.keys() {
            *df.entry(term).or_insert(0.0) += 1.0;
        }
    }
    let vectors: Vec<BTreeMap<&T, f64>> = docs
        .iter()
        .map(|doc| {
            let mut v: BTreeMap<&T, f64> = doc
                .iter()
                .map(|(term, tf)| (term, tf * (((1.0 + n) / (1.0 + df[term])).ln() + 1.0)))
                .collect();
            let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
            v.values_mut().for_each(|w| *w /= norm);
            v
        })
        .collect();
    let (va, vb) = vectors.split_at(corpus_a.len());
    Ok(va
        .iter()
        .map(|x| {
            vb.iter()
                .map(|y| {
                    let dot: f64 = x.iter().filter_map(|(t, w)| y.get(t).map(|u| w * u)).sum();
                    dot.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    /// Values the mean and std are taken over (split averages for few-shot).
    pub units: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    /// Standard deviation is zero because only one unit was available.
    pub single_unit: bool,
    pub complete: bool,
    pub t_vs_reference: Option<f64>,
    pub p_vs_reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub setting: Setting,
    pub reference: Method,
    pub ttest: TTestKind,
    pub run_count: usize,
    pub complete: bool,
    pub methods: Vec<MethodSummary>,
}

/// Per-unit `(accuracy, f1)` values. Few-shot: seed-averaged per split,
/// keyed by sample index. Zero-shot: one value per seed.
fn units(reports: &[&RunReport], setting: Setting) -> (BTreeMap<u64, (f64, f64)>, bool) {
    match setting {
        Setting::ZeroShot => {
            let mut by_seed: BTreeMap<u64, Vec<&RunReport>> = BTreeMap::new();
            for r in reports {
                by_seed.entry(r.seed).or_default().push(r);
            }
            let duplicate = by_seed.values().any(|v| v.len() != 1);
            let out = by_seed
                .into_iter()
                .map(|(seed, rs)| {
                    let acc = rs.iter().map(|r| r.metrics.accuracy).collect::<Vec<_>>();
                    let f1 = rs.iter().map(|r| r.metrics.f1).collect::<Vec<_>>();
                    (seed, (mean_std(&acc).0, mean_std(&f1).0))
                })
                .collect::<BTreeMap<_, _>>();
            let complete = !duplicate && out.len() == PRETRAIN_SEEDS;
            (out, complete)
        }
        Setting::FewShot => {
            let mut by_split: BTreeMap<u64, BTreeMap<u64, &RunReport>> = BTreeMap::new();
            let mut duplicate = false;
            for r in reports {
                let split = r.sample_index.map_or(u64::MAX, |s| s as u64);
                duplicate |= by_split.entry(split).or_default().insert(r.seed, r).is_some();
            }
            let complete = !duplicate
                && !by_split.contains_key(&u64::MAX)
                && by_split.len() == FEWSHOT_SPLITS
                && by_split.values().all(|s| s.len() == PRETRAIN_SEEDS);
            let out = by_split
                .into_iter()
                .map(|(split, seeds)| {
                    let acc: Vec<f64> = seeds.values().map(|r| r.metrics.accuracy).collect();
                    let f1: Vec<f64> = seeds.values().map(|r| r.metrics.f1).collect();
                    (split, (mean_std(&acc).0, mean_std(&f1).0))
                })
                .collect();
            (out, complete)
        }
    }
}

/// Mean and sample std per method over units, plus t-tests of accuracy
/// against `reference`. Reports of other settings are ignored.
pub fn aggregate(reports: &[RunReport], setting: Setting, reference: Method, kind: TTestKind) -> Result<AggregateReport> {
    let mut by_method: BTreeMap<Method, Vec<&RunReport>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.setting == setting) {
        by_method.entry(r.method).or_default().push(r);
    }
    if by_method.is_empty() {
        return Err(Error::input("no reports to aggregate"));
    }
    let unit_map: BTreeMap<Method, (BTreeMap<u64, (f64, f64)>, bool)> =
        by_method.iter().map(|(m, rs)| (*m, units(rs, setting))).collect();
    let methods: Vec<Method> = unit_map.keys().copied().collect();
    let reference_units = unit_map.get(&reference).map(|(u, _)| u);

    let mut summaries = Vec::new();
    for method in methods {
        let (u, complete) = &unit_map[&method];
        let acc: Vec<f64> = u.values().map(|v| v.0).collect();
        let f1: Vec<f64> = u.values().map(|v| v.1).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&acc);
        let (f1_mean, f1_std) = mean_std(&f1);
        let test = match reference_units {
            Some(r) if method != reference => {
                let (a, b): (Vec<f64>, Vec<f64>) = if kind == TTestKind::Paired {
                    let keys: BTreeSet<&u64> = u.keys().filter(|k| r.contains_key(k)).collect();
                    keys.iter().map(|k| (u[*k].0, r[*k].0)).unzip()
                } else {
                    (acc.clone(), r.values().map(|v| v.0).collect())
                };
                ttest(&a, &b, kind).ok()
            }
            _ => None,
        };
        summaries.push(MethodSummary {
            method,
            runs: by_method[&method].len(),
            units: acc.len(),
            accuracy_mean,
            accuracy_std,
            f1_mean,
            f1_std,
            single_unit: acc.len() == 1,
            complete: *complete,
            t_vs_reference: test.map(|t| t.t),
            p_vs_reference: test.map(|t| t.p),
        });
    }
    Ok(AggregateReport {
        setting,
        reference,
        ttest: kind,
        run_count: by_method.values().map(Vec::len).sum(),
        complete: summaries.iter().all(|s| s.complete),
        methods: summaries,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl AggregateReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,runs,units,accuracy_mean,accuracy_std,f1_mean,f1_std,t_vs_reference,p_vs_reference,complete\n",
        );
        for s in &self.methods {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
                s.method,
                s.runs,
                s.units,
                s.accuracy_mean,
                s.accuracy_std,
                s.f1_mean,
                s.f1_std,
                fmt_opt(s.t_vs_reference),
                fmt_opt(s.p_vs_reference),
                s.complete
            ));
        }
        out
    }
}
