//! Example representation and assembly of the model input
//! `[soft prompt; hard prompt; input; mask]`, right-padded to a fixed length.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturbation::PerturbationBatch;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Input {
    Tokens(Vec<usize>),
    Point([f64; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Input,
    pub label: Option<usize>,
    pub domain: DomainTag,
}

impl Example {
    pub fn tokens(tokens: Vec<usize>, label: Option<usize>, domain: DomainTag) -> Self {
        Self {
            input: Input::Tokens(tokens),
            label,
            domain,
        }
    }

    pub fn point(point: [f64; 2], label: Option<usize>, domain: DomainTag) -> Self {
        Self {
            input: Input::Point(point),
            label,
            domain,
        }
    }

    /// Number of input-role rows this example occupies.
    pub fn input_len(&self) -> usize {
        match &self.input {
            Input::Tokens(t) => t.len(),
            Input::Point(_) => 1,
        }
    }

    pub fn without_label(&self) -> Self {
        Self {
            label: None,
            ..self.clone()
        }
    }
}

fn check_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::input(format!("{what} contains non-finite entries")))
    }
}

/// Fixed token-embedding table (V x d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    matrix: Array2<f64>,
}

impl EmbeddingTable {
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        check_finite(&matrix, "embedding table")?;
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::input("embedding table must be non-empty"));
        }
        Ok(Self { matrix })
    }

    /// i.i.d. N(0, scale^2) entries; row 0 is left as the zero (pad) vector.
    pub fn gaussian(vocab: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "embedding-table", 0);
        let normal = Normal::new(0.0, scale).expect("valid scale");
        let mut matrix = Array2::from_shape_fn((vocab, dim), |_| normal.sample(&mut r));
        matrix.row_mut(0).fill(0.0);
        Self { matrix }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn row(&self, id: usize) -> Result<ArrayView1<'_, f64>> {
        if id >= self.vocab_size() {
            return Err(Error::input(format!(
                "token id {id} out of range for vocabulary of size {}",
                self.vocab_size()
            )));
        }
        Ok(self.matrix.row(id))
    }

    /// Row `i` of the result is the table row for `tokens[i]`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((tokens.len(), self.dim()));
        for (i, &t) in tokens.iter().enumerate() {
            out.row_mut(i).assign(&self.row(t)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text)?;
        Self::from_matrix(table.matrix)
    }
}

/// Soft prompt: the m x d trainable rows prepended to every input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParameters {
    pub rows: Array2<f64>,
}

impl PromptParameters {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        check_finite(&rows, "prompt")?;
        Ok(Self { rows })
    }

    pub fn from_table_rows(table: &EmbeddingTable, ids: &[usize]) -> Result<Self> {
        Self::new(table.embed(ids)?)
    }

    pub fn gaussian(len: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "prompt-init", 0);
        let normal = Normal::new(0.0, scale).expect("valid scale");
        Self {
            rows: Array2::from_shape_fn((len, dim), |_| normal.sample(&mut r)),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Prompt,
    Hard,
    Input,
    Mask,
    Pad,
}

/// One assembled model input: `L x d` embeddings with per-position roles.
///
/// Layout is `[prompt (m); hard (k); input (n); mask (1); pad (...)]`.
/// `input_slots` is the padded input width that perturbations are shaped
/// against; slots past the real input length correspond to pad positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedExample {
    pub embeddings: Array2<f64>,
    pub roles: Vec<Role>,
    pub mask_position: usize,
    pub input_start: usize,
    pub input_len: usize,
    pub input_slots: usize,
}

impl EmbeddedExample {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn input_range(&self) -> std::ops::Range<usize> {
        self.input_start..self.input_start + self.input_len
    }

    pub fn prompt_len(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::Prompt).count()
    }

    /// Rows carrying `role`, in sequence order.
    pub fn strip(&self, role: Role) -> Array2<f64> {
        let idx: Vec<usize> = self
            .roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect();
        self.embeddings.select(Axis(0), &idx)
    }

    /// Add `delta` (input_slots x d) to the input-role rows. Rows of `delta`
    /// beyond the real input length sit over padding and are ignored.
    pub fn perturbed(&self, delta: &Array2<f64>) -> Result<Self> {
        if delta.dim() != (self.input_slots, self.dim()) {
            return Err(Error::input(format!(
                "perturbation shape {:?} does not match input slots {:?}",
                delta.dim(),
                (self.input_slots, self.dim())
            )));
        }
        let mut out = self.clone();
        let range = self.input_range();
        let mut rows = out.embeddings.slice_mut(s![range, ..]);
        rows += &delta.slice(s![..self.input_len, ..]);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddedBatch {
    pub rows: Vec<EmbeddedExample>,
}

impl EmbeddedBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Concatenate `[prompt; hard; x; mask]` and right-pad with zero rows so the
/// input block spans `input_slots` rows (`None` means no padding).
pub fn assemble(
    prompt: &PromptParameters,
    hard: &Array2<f64>,
    x: &Array2<f64>,
    mask_row: ArrayView1<'_, f64>,
    input_slots: Option<usize>,
) -> Result<EmbeddedExample> {
    let d = prompt.dim();
    if hard.ncols() != d || x.ncols() != d || mask_row.len() != d {
        return Err(Error::input(format!(
            "dimension mismatch: prompt d={d}, hard d={}, input d={}, mask d={}",
            hard.ncols(),
            x.ncols(),
            mask_row.len()
        )));
    }
    let (m, k, n) = (prompt.len(), hard.nrows(), x.nrows());
    let slots = input_slots.unwrap_or(n);
    if n > slots {
        return Err(Error::input(format!(
            "input length {n} exceeds maximum {slots}"
        )));
    }
    let len = m + k + slots + 1;
    let mut embeddings = Array2::zeros((len, d));
    embeddings.slice_mut(s![0..m, ..]).assign(&prompt.rows);
    embeddings.slice_mut(s![m..m + k, ..]).assign(hard);
    embeddings.slice_mut(s![m + k..m + k + n, ..]).assign(x);
    let mask_position = m + k + n;
    embeddings.row_mut(mask_position).assign(&mask_row);

    let mut roles = Vec::with_capacity(len);
    roles.extend(std::iter::repeat_n(Role::Prompt, m));
    roles.extend(std::iter::repeat_n(Role::Hard, k));
    roles.extend(std::iter::repeat_n(Role::Input, n));
    roles.push(Role::Mask);
    roles.extend(std::iter::repeat_n(Role::Pad, slots - n));

    Ok(EmbeddedExample {
        embeddings,
        roles,
        mask_position,
        input_start: m + k,
        input_len: n,
        input_slots: slots,
    })
}

pub fn apply_perturbation(batch: &EmbeddedBatch, delta: &PerturbationBatch) -> Result<EmbeddedBatch> {
    if batch.len() != delta.len() {
        return Err(Error::input(format!(
            "batch has {} examples but perturbation has {}",
            batch.len(),
            delta.len()
        )));
    }
    let rows = batch
        .rows
        .iter()
        .zip(&delta.deltas)
        .map(|(row, d)| row.perturbed(d))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedBatch { rows })
}

/// Fixed 2 x d map lifting a raw 2-D point to one input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLift {
    pub matrix: Array2<f64>,
}

impl FeatureLift {
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "feature-lift", 0);
        let normal = Normal::new(0.0, 1.0).expect("valid scale");
        Self {
            matrix: Array2::from_shape_fn((2, dim), |_| normal.sample(&mut r)),
        }
    }

    pub fn lift(&self, point: [f64; 2]) -> Array2<f64> {
        let p = Array1::from(point.to_vec());
        p.dot(&self.matrix).insert_axis(Axis(0))
    }
}

/// Everything needed to turn an [`Example`] into an [`EmbeddedExample`]
/// for a given soft prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontend {
    pub table: EmbeddingTable,
    pub hard_ids: Vec<usize>,
    pub mask_id: usize,
    pub max_input_len: usize,
    pub lift: Option<FeatureLift>,
}

impl Frontend {
    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn seq_len(&self, prompt_len: usize) -> usize {
        prompt_len + self.hard_ids.len() + self.max_input_len + 1
    }

    pub fn input_rows(&self, example: &Example) -> Result<Array2<f64>> {
        match &example.input {
            Input::Tokens(tokens) => {
                if tokens.len() > self.max_input_len {
                    return Err(Error::input(format!(
                        "sequence length {} exceeds maximum {}",
                        tokens.len(),
                        self.max_input_len
                    )));
                }
                self.table.embed(tokens)
            }
            Input::Point(p) => {
                let lift = self
                    .lift
                    .as_ref()
                    .ok_or_else(|| Error::input("point input requires a feature lift"))?;
                Ok(lift.lift(*p))
            }
        }
    }

    pub fn encode(&self, prompt: &PromptParameters, example: &Example) -> Result<EmbeddedExample> {
        let hard = self.table.embed(&self.hard_ids)?;
        let x = self.input_rows(example)?;
        assemble(
            prompt,
            &hard,
            &x,
            self.table.row(self.mask_id)?,
            Some(self.max_input_len),
        )
    }

    pub fn encode_batch(&self, prompt: &PromptParameters, examples: &[&Example]) -> Result<EmbeddedBatch> {
        let rows = examples
            .iter()
            .map(|e| self.encode(prompt, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddedBatch { rows })
    }
}
