//! Synthetic two-domain tasks, the few-shot split protocol, and JSONL I/O.
//!
//! Two generators are provided:
//!
//! * `token-stats`: each example is a token sequence whose label is the class
//!   block holding the strict majority of its class-indicator tokens. The
//!   target domain rewrites the first `round(s * block)` ids of every class
//!   block to ids in a disjoint synonym block. The matching embedding table
//!   places each synonym near its source token, displaced along one shared
//!   domain direction.
//! * `toy2d`: Gaussian clusters per class; the target domain rotates the
//!   clusters by `s * 90` degrees and shifts them slightly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{DomainTag, EmbeddingTable, Example, Input};
use crate::error::{Error, Result};
use crate::rng;

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const HARD_IDS: [usize; 2] = [2, 3];
pub const RESERVED: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TokenStats,
    Toy2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainPairSpec {
    pub task: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub shift: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    /// Probability a token is filler rather than class-indicating.
    pub filler_rate: f64,
    /// Probability a class-indicating token comes from the label's own block.
    pub purity: f64,
    pub seed: u64,
}

impl Default for DomainPairSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::TokenStats,
            vocab: 64,
            seq_len: 16,
            classes: 3,
            shift: 0.5,
            n_source: 2000,
            n_target: 2000,
            n_eval: 600,
            filler_rate: 0.25,
            purity: 0.6,
            seed: 1,
        }
    }
}

impl DomainPairSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::input(format!("shift must be in [0, 1], got {}", self.shift)));
        }
        if self.classes < 2 {
            return Err(Error::input("need at least two classes"));
        }
        if self.n_source == 0 || self.n_target == 0 || self.n_eval == 0 {
            return Err(Error::input("dataset sizes must be positive"));
        }
        if self.task == TaskKind::TokenStats {
            if self.seq_len == 0 {
                return Err(Error::input("sequence length must be positive"));
            }
            TokenLayout::new(self.vocab, self.classes)?;
            if !(0.0..1.0).contains(&self.filler_rate) || !(0.0..=1.0).contains(&self.purity) {
                return Err(Error::input("filler_rate must be in [0,1) and purity in [0,1]"));
            }
            if self.purity * (self.classes as f64) <= 1.0 {
                return Err(Error::input("purity must exceed 1/classes so labels are learnable"));
            }
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        default_label_names(self.classes)
    }
}

/// Verbalizer names: `No/Yes` for two classes, `Yes/Neutral/No` for three,
/// `c0..` otherwise.
pub fn default_label_names(classes: usize) -> Vec<String> {
    match classes {
        2 => vec!["No".into(), "Yes".into()],
        3 => vec!["Yes".into(), "Neutral".into(), "No".into()],
        c => (0..c).map(|i| format!("c{i}")).collect(),
    }
}

/// Vocabulary partition for the token-stats task.
///
/// `[pad, mask, hard0, hard1 | class blocks | synonym blocks | filler]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub vocab: usize,
    pub classes: usize,
    pub block: usize,
}

impl TokenLayout {
    pub fn new(vocab: usize, classes: usize) -> Result<Self> {
        if vocab <= RESERVED {
            return Err(Error::input(format!("vocabulary {vocab} too small")));
        }
        let block = (vocab - RESERVED) / (2 * classes + 1);
        if block == 0 {
            return Err(Error::input(format!(
                "vocabulary {vocab} too small for {classes} classes"
            )));
        }
        Ok(Self {
            vocab,
            classes,
            block,
        })
    }

    pub fn class_start(&self, c: usize) -> usize {
        RESERVED + c * self.block
    }

    pub fn synonym_start(&self, c: usize) -> usize {
        RESERVED + (self.classes + c) * self.block
    }

    pub fn filler_range(&self) -> std::ops::Range<usize> {
        RESERVED + 2 * self.classes * self.block..self.vocab
    }

    /// Class block of a token (synonyms count toward their source block).
    pub fn class_of(&self, token: usize) -> Option<usize> {
        if token < RESERVED || token >= self.filler_range().start {
            return None;
        }
        Some(((token - RESERVED) / self.block) % self.classes)
    }

    /// Verbalizer token of class `c`: the last id of its block, which stays
    /// in place for every shift below 1.
    pub fn label_token(&self, c: usize) -> usize {
        self.class_start(c) + self.block - 1
    }

    pub fn remapped_per_block(&self, shift: f64) -> usize {
        (shift * self.block as f64).round() as usize
    }

    pub fn to_target(&self, token: usize, shift: f64) -> usize {
        let k = self.remapped_per_block(shift);
        match self.class_of(token) {
            Some(c) if token < self.synonym_start(0) => {
                let offset = token - self.class_start(c);
                if offset < k {
                    self.synonym_start(c) + offset
                } else {
                    token
                }
            }
            _ => token,
        }
    }

    /// Leading filler ids (cycled), used to initialize soft prompts from
    /// table rows without biasing them toward any class block.
    pub fn prompt_init_ids(&self, len: usize) -> Vec<usize> {
        let filler = self.filler_range();
        if filler.is_empty() {
            return (0..len).map(|i| RESERVED + i % (self.vocab - RESERVED)).collect();
        }
        (0..len).map(|i| filler.start + i % filler.len()).collect()
    }
}

/// Geometry of the token-stats embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingGeometry {
    pub centroid_scale: f64,
    pub token_noise: f64,
    pub synonym_offset: f64,
    pub synonym_noise: f64,
    pub filler_scale: f64,
}

impl Default for EmbeddingGeometry {
    fn default() -> Self {
        Self {
            centroid_scale: 2.0,
            token_noise: 0.5,
            synonym_offset: 3.0,
            synonym_noise: 0.2,
            filler_scale: 1.0,
        }
    }
}

impl TokenLayout {
    /// Seeded table: class tokens cluster around a per-class centroid, each
    /// synonym sits at its source token plus a shared domain offset, filler
    /// and reserved rows are isotropic. Row 0 (pad) is zero.
    pub fn embedding_table(&self, dim: usize, geometry: &EmbeddingGeometry, seed: u64) -> EmbeddingTable {
        let mut r = rng::stream(seed, "token-table", 0);
        let unit = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut draw = |scale: f64| Array1::from_shape_fn(dim, |_| scale * unit.sample(&mut r));

        let mut m = Array2::<f64>::zeros((self.vocab, dim));
        for id in 1..RESERVED {
            m.row_mut(id).assign(&draw(1.0));
        }
        let centroids: Vec<Array1<f64>> = (0..self.classes).map(|_| draw(geometry.centroid_scale)).collect();
        let mut offset = draw(1.0);
        let norm = offset.dot(&offset).sqrt();
        offset *= geometry.synonym_offset / norm;
        for (c, centroid) in centroids.iter().enumerate() {
            for i in 0..self.block {
                let base = centroid + &draw(geometry.token_noise);
                let synonym = &base + &offset + &draw(geometry.synonym_noise);
                m.row_mut(self.class_start(c) + i).assign(&base);
                m.row_mut(self.synonym_start(c) + i).assign(&synonym);
            }
        }
        for id in self.filler_range() {
            m.row_mut(id).assign(&draw(geometry.filler_scale));
        }
        EmbeddingTable::from_matrix(m).expect("finite table")
    }
}

/// Labeled examples; every example carries a label.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledSet {
    examples: Vec<Example>,
}

impl LabeledSet {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        if let Some(i) = examples.iter().position(|e| e.label.is_none()) {
            return Err(Error::input(format!("example {i} of a labeled set has no label")));
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label.expect("labeled")).collect()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for y in self.labels() {
            if y < classes {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Split off the trailing `fraction` as a validation set.
    pub fn split_validation(&self, fraction: f64) -> Result<(LabeledSet, LabeledSet)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::input("validation fraction must be in [0, 1)"));
        }
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - n_val;
        Ok((
            LabeledSet {
                examples: self.examples[..cut].to_vec(),
            },
            LabeledSet {
                examples: self.examples[cut..].to_vec(),
            },
        ))
    }

    pub fn strip_labels(&self) -> UnlabeledSet {
        UnlabeledSet {
            examples: self.examples.iter().map(Example::without_label).collect(),
        }
    }
}

/// Unlabeled examples; labels are absent by construction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnlabeledSet {
    examples: Vec<Example>,
}

impl UnlabeledSet {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        if examples.iter().any(|e| e.label.is_some()) {
            return Err(Error::input("unlabeled set contains labels"));
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Output of [`generate_pair`]. Target training labels are kept apart from
/// the unlabeled set; only few-shot sampling and analysis read them.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: LabeledSet,
    pub target_train: UnlabeledSet,
    pub target_train_labels: Vec<usize>,
    pub target_eval: LabeledSet,
}

impl DomainPair {
    /// Target training pool with labels re-attached (few-shot sampling only).
    pub fn target_pool(&self) -> LabeledSet {
        let examples = self
            .target_train
            .examples()
            .iter()
            .zip(&self.target_train_labels)
            .map(|(e, y)| Example {
                label: Some(*y),
                ..e.clone()
            })
            .collect();
        LabeledSet { examples }
    }
}

fn balanced_labels<R: Rng>(n: usize, classes: usize, r: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(r);
    labels
}

fn token_example<R: Rng>(spec: &DomainPairSpec, layout: &TokenLayout, y: usize, r: &mut R) -> Vec<usize> {
    let filler = layout.filler_range();
    loop {
        let mut counts = vec![0usize; spec.classes];
        let tokens: Vec<usize> = (0..spec.seq_len)
            .map(|_| {
                if !filler.is_empty() && r.random::<f64>() < spec.filler_rate {
                    r.random_range(filler.clone())
                } else {
                    let c = if r.random::<f64>() < spec.purity {
                        y
                    } else {
                        let other = r.random_range(0..spec.classes - 1);
                        if other >= y {
                            other + 1
                        } else {
                            other
                        }
                    };
                    counts[c] += 1;
                    layout.class_start(c) + r.random_range(0..layout.block)
                }
            })
            .collect();
        let top = counts[y];
        if counts.iter().enumerate().all(|(c, n)| c == y || *n < top) {
            return tokens;
        }
    }
}

const TOY_RADIUS: f64 = 1.5;
const TOY_STD: f64 = 0.5;
const TOY_SHIFT: [f64; 2] = [0.25, 0.25];

/// Class mean of the toy2d task in the given domain.
pub fn toy_class_mean(c: usize, classes: usize, domain: DomainTag, shift: f64) -> [f64; 2] {
    let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
    let base = [TOY_RADIUS * angle.cos(), TOY_RADIUS * angle.sin()];
    match domain {
        DomainTag::Source => base,
        DomainTag::Target => rotate_shift(base, shift),
    }
}

fn rotate_shift(p: [f64; 2], shift: f64) -> [f64; 2] {
    let theta = shift * std::f64::consts::FRAC_PI_2;
    let (sin, cos) = theta.sin_cos();
    [
        cos * p[0] - sin * p[1] + shift * TOY_SHIFT[0],
        sin * p[0] + cos * p[1] + shift * TOY_SHIFT[1],
    ]
}

pub fn toy_std() -> f64 {
    TOY_STD
}

fn generate_set(spec: &DomainPairSpec, domain: DomainTag, n: usize, stream: &str) -> Vec<Example> {
    let mut r = rng::stream(spec.seed, stream, 0);
    let labels = balanced_labels(n, spec.classes, &mut r);
    match spec.task {
        TaskKind::TokenStats => {
            let layout = TokenLayout::new(spec.vocab, spec.classes).expect("validated");
            labels
                .into_iter()
                .map(|y| {
                    let mut tokens = token_example(spec, &layout, y, &mut r);
                    if domain == DomainTag::Target {
                        for t in &mut tokens {
                            *t = layout.to_target(*t, spec.shift);
                        }
                    }
                    Example::tokens(tokens, Some(y), domain)
                })
                .collect()
        }
        TaskKind::Toy2d => {
            let noise = Normal::new(0.0, TOY_STD).expect("valid std");
            labels
                .into_iter()
                .map(|y| {
                    let base = toy_class_mean(y, spec.classes, DomainTag::Source, spec.shift);
                    let p = [base[0] + noise.sample(&mut r), base[1] + noise.sample(&mut r)];
                    let p = match domain {
                        DomainTag::Source => p,
                        DomainTag::Target => rotate_shift(p, spec.shift),
                    };
                    Example::point(p, Some(y), domain)
                })
                .collect()
        }
    }
}

/// Labeled source set, unlabeled target training set (labels held apart),
/// and a disjoint labeled target evaluation set.
pub fn generate_pair(spec: &DomainPairSpec) -> Result<DomainPair> {
    spec.validate()?;
    let source = generate_set(spec, DomainTag::Source, spec.n_source, "gen-source");
    let target = generate_set(spec, DomainTag::Target, spec.n_target, "gen-target");
    let eval = generate_set(spec, DomainTag::Target, spec.n_eval, "gen-eval");
    let target_train_labels = target.iter().map(|e| e.label.expect("generated")).collect();
    Ok(DomainPair {
        source: LabeledSet::new(source)?,
        target_train: UnlabeledSet::new(target.iter().map(Example::without_label).collect())?,
        target_train_labels,
        target_eval: LabeledSet::new(eval)?,
    })
}

pub const SHOTS_PER_CLASS: usize = 8;
pub const FEWSHOT_SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: LabeledSet,
    pub dev: LabeledSet,
    pub sample_index: usize,
    pub seed: u64,
}

/// Stratified draw without replacement of 8 train + 8 dev examples per class.
/// Reproducible from `(seed, sample_index)`.
pub fn sample_fewshot(pool: &LabeledSet, classes: usize, sample_index: usize, seed: u64) -> Result<FewShotSplit> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, y) in pool.labels().into_iter().enumerate() {
        if y >= classes {
            return Err(Error::input(format!("label {y} out of range for {classes} classes")));
        }
        by_class[y].push(i);
    }
    let need = 2 * SHOTS_PER_CLASS;
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < need) {
        return Err(Error::input(format!(
            "class {c} has {} pool examples; few-shot sampling needs {need}",
            members.len()
        )));
    }
    let mut r = rng::stream(seed, "fewshot", sample_index as u64);
    let mut train = Vec::with_capacity(classes * SHOTS_PER_CLASS);
    let mut dev = Vec::with_capacity(classes * SHOTS_PER_CLASS);
    for members in &mut by_class {
        let (picked, _) = members.partial_shuffle(&mut r, need);
        train.extend(picked[..SHOTS_PER_CLASS].iter().map(|i| pool.examples()[*i].clone()));
        dev.extend(picked[SHOTS_PER_CLASS..].iter().map(|i| pool.examples()[*i].clone()));
    }
    Ok(FewShotSplit {
        train: LabeledSet::new(train)?,
        dev: LabeledSet::new(dev)?,
        sample_index,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonlRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default = "default_domain")]
    domain: DomainTag,
}

fn default_domain() -> DomainTag {
    DomainTag::Source
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Loaded {
    pub examples: Vec<Example>,
    pub warnings: Vec<String>,
}

/// Parse one-object-per-line JSONL, mapping label strings through `labels`.
pub fn load_jsonl(path: &Path, labels: &[String]) -> Result<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut out = Loaded::default();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let input = match (rec.tokens, rec.point) {
            (Some(t), None) => Input::Tokens(t),
            (None, Some(p)) => Input::Point(p),
            _ => return Err(parse_err("exactly one of `tokens` or `point` is required".into())),
        };
        let label = match rec.label {
            None => None,
            Some(name) => Some(
                *index
                    .get(name.as_str())
                    .ok_or_else(|| parse_err(format!("unknown label `{name}`")))?,
            ),
        };
        out.examples.push(Example {
            input,
            label,
            domain: rec.domain,
        });
    }
    if out.examples.is_empty() {
        out.warnings.push(format!("{} contains no examples", path.display()));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example], labels: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for e in examples {
        let (tokens, point) = match &e.input {
            Input::Tokens(t) => (Some(t.clone()), None),
            Input::Point(p) => (None, Some(*p)),
        };
        let label = match e.label {
            None => None,
            Some(y) => Some(
                labels
                    .get(y)
                    .ok_or_else(|| Error::input(format!("label {y} has no verbalizer name")))?
                    .clone(),
            ),
        };
        let rec = JsonlRecord {
            tokens,
            point,
            label,
            domain: e.domain,
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
