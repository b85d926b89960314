//! Datasets: synthetic generators, multi-source partitioning and mixture
//! sampling, label perturbation, CSV ingestion, and standardization.
//!
//! All generators are pure functions of their seed: equal seeds give
//! bit-identical datasets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::EmpiricalDistribution;

/// Labeled regression samples: a feature matrix, scalar targets, and
/// optionally a source id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    features: Vec<f64>,
    n: usize,
    dim: usize,
    labels: Vec<f64>,
    sources: Option<Vec<usize>>,
}

impl DataSet {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<f64>,
        sources: Option<Vec<usize>>,
    ) -> Result<Self> {
        if dim == 0 || features.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: features.len(),
                context: "feature matrix not divisible by dim",
            });
        }
        let n = features.len() / dim;
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len(),
                context: "label vector length",
            });
        }
        if let Some(s) = &sources {
            if s.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: s.len(),
                    context: "source id vector length",
                });
            }
        }
        if features.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        Ok(DataSet {
            features,
            n,
            dim,
            labels,
            sources,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn sources(&self) -> Option<&[usize]> {
        self.sources.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> DataSet {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut sources = self.sources.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            if let (Some(out), Some(src)) = (sources.as_mut(), self.sources.as_ref()) {
                out.push(src[i]);
            }
        }
        DataSet {
            features,
            n: indices.len(),
            dim: self.dim,
            labels,
            sources,
        }
    }

    pub fn concat(parts: &[&DataSet]) -> Result<DataSet> {
        let first = parts.first().ok_or(Error::EmptyInput("concat parts"))?;
        let dim = first.dim;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let all_sourced = parts.iter().all(|p| p.sources.is_some());
        let mut sources = if all_sourced { Some(Vec::new()) } else { None };
        for p in parts {
            if p.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.dim,
                    context: "concat feature dims",
                });
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
            if let (Some(out), Some(src)) = (sources.as_mut(), p.sources.as_ref()) {
                out.extend_from_slice(src);
            }
        }
        DataSet::new(features, dim, labels, sources)
    }

    /// The rows as a uniform point cloud in joint `(x, y)` space.
    pub fn joint_cloud(&self) -> Result<EmpiricalDistribution> {
        let d = self.dim + 1;
        let mut pts = Vec::with_capacity(self.n * d);
        for i in 0..self.n {
            pts.extend_from_slice(self.row(i));
            pts.push(self.labels[i]);
        }
        EmpiricalDistribution::uniform(pts, d)
    }
}

/// The multi-source layout: `K` source sets, one calibration set, and a
/// per-source pool the test mixtures draw from. All index-disjoint.
#[derive(Debug, Clone)]
pub struct SourceCollection {
    pub sources: Vec<DataSet>,
    pub calibration: DataSet,
    pub test_pools: Vec<DataSet>,
}

impl SourceCollection {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }
}

/// Conditional law of the first toy distribution: mean and variance of
/// `Y | X = x` under the calibration side.
pub fn toy_p_law(x: f64) -> (f64, f64) {
    (-0.5 * x, -0.3 * x * x + 0.3 * x)
}

/// Conditional law of `Y | X = x` under the shifted side.
pub fn toy_q_law(x: f64) -> (f64, f64) {
    (0.25 * x, -0.24 * x * x + 0.24 * x)
}

fn sample_conditional(x: f64, law: fn(f64) -> (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    let (mean, var) = law(x);
    let std = var.max(0.0).sqrt();
    let z: f64 = StandardNormal.sample(rng);
    mean + std * z
}

/// Paired samples from the toy shift: calibration features uniform on
/// `[0, 1]`, shifted features uniform on `[0, 0.8]`, with the conditional
/// Gaussian laws of [`toy_p_law`] and [`toy_q_law`] (second argument read as
/// a variance).
pub fn gen_toy_shift(n: usize, seed: u64) -> Result<(DataSet, DataSet)> {
    if n == 0 {
        return Err(Error::EmptyInput("toy generator size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p_features = Vec::with_capacity(n);
    let mut p_labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(0.0..1.0);
        p_features.push(x);
        p_labels.push(sample_conditional(x, toy_p_law, &mut rng));
    }
    let mut q_features = Vec::with_capacity(n);
    let mut q_labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(0.0..0.8);
        q_features.push(x);
        q_labels.push(sample_conditional(x, toy_q_law, &mut rng));
    }
    Ok((
        DataSet::new(p_features, 1, p_labels, None)?,
        DataSet::new(q_features, 1, q_labels, None)?,
    ))
}

/// I.i.d. heteroscedastic testbed: `x ~ U(-1, 1)`,
/// `y = sin(2x) + noise_scale * |x| * eps`.
pub fn gen_heteroscedastic(n: usize, noise_scale: f64, seed: u64) -> Result<DataSet> {
    if n == 0 {
        return Err(Error::EmptyInput("heteroscedastic generator size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen_range(-1.0..1.0);
        let z: f64 = StandardNormal.sample(&mut rng);
        features.push(x);
        labels.push((2.0 * x).sin() + noise_scale * x.abs() * z);
    }
    DataSet::new(features, 1, labels, None)
}

/// Raw multi-source synthetic data: overlapping 2-D feature clouds whose
/// conditional label laws differ by source, so a mixture shift moves both the
/// feature marginal and `Y | X`. Rows carry their source id.
pub fn gen_multisource(k: usize, n_per_source: usize, seed: u64) -> Result<DataSet> {
    if k == 0 || n_per_source == 0 {
        return Err(Error::EmptyInput("multisource generator sizes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(2 * k * n_per_source);
    let mut labels = Vec::with_capacity(k * n_per_source);
    let mut sources = Vec::with_capacity(k * n_per_source);
    for source in 0..k {
        let angle = 2.0 * std::f64::consts::PI * source as f64 / k as f64;
        let (cx, cy) = (0.6 * angle.cos(), 0.6 * angle.sin());
        let intercept = -1.5 + 3.0 * source as f64 / (k.max(2) - 1) as f64;
        for _ in 0..n_per_source {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let x1 = cx + z1;
            let x2 = cy + z2;
            let noise: f64 = StandardNormal.sample(&mut rng);
            let y = x1 + intercept + (0.2 + 0.4 * x1.abs()) * noise;
            features.push(x1);
            features.push(x2);
            labels.push(y);
            sources.push(source);
        }
    }
    DataSet::new(features, 2, labels, Some(sources))
}

/// How raw rows are assigned to the `K` subsets.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionRule {
    /// Sort by one feature column and cut into `K` equal-count chunks.
    ByFeatureQuantile(usize),
    /// Use the dataset's source id column.
    BySourceIds,
}

/// Requested sample counts for the multi-source split. Calibration always
/// matches the per-source size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MsdgSizes {
    pub per_source: usize,
}

/// Splits raw data into `K` subsets by the rule, then draws the source sets,
/// the calibration set (from the union of what remains), and the per-source
/// test pools, all without replacement and mutually index-disjoint.
pub fn partition_msdg(
    raw: &DataSet,
    k: usize,
    rule: PartitionRule,
    sizes: MsdgSizes,
    seed: u64,
) -> Result<SourceCollection> {
    if k == 0 {
        return Err(Error::EmptyInput("partition source count"));
    }
    let per_source = sizes.per_source;
    if per_source == 0 {
        return Err(Error::EmptyInput("per-source size"));
    }
    let mut subsets: Vec<Vec<usize>> = vec![Vec::new(); k];
    match rule {
        PartitionRule::ByFeatureQuantile(col) => {
            if col >= raw.dim() {
                return Err(Error::InvalidParameter(format!(
                    "quantile column {col} out of range (dim {})",
                    raw.dim()
                )));
            }
            let mut order: Vec<usize> = (0..raw.len()).collect();
            order.sort_by(|&a, &b| {
                raw.row(a)[col]
                    .partial_cmp(&raw.row(b)[col])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for (pos, idx) in order.iter().enumerate() {
                let bucket = (pos * k / raw.len()).min(k - 1);
                subsets[bucket].push(*idx);
            }
        }
        PartitionRule::BySourceIds => {
            let ids = raw.sources().ok_or(Error::InvalidParameter(
                "partition by source ids needs a source column".into(),
            ))?;
            for (idx, &s) in ids.iter().enumerate() {
                if s >= k {
                    return Err(Error::InvalidParameter(format!(
                        "source id {s} out of range for K = {k}"
                    )));
                }
                subsets[s].push(idx);
            }
        }
    }

    // Need per_source rows from each subset, plus per_source calibration rows
    // from the union of leftovers.
    let total_needed = per_source * (k + 1);
    if total_needed > raw.len() {
        return Err(Error::InsufficientData {
            needed: total_needed,
            have: raw.len(),
            context: "multi-source partition",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source_sets = Vec::with_capacity(k);
    let mut leftovers: Vec<Vec<usize>> = Vec::with_capacity(k);
    for subset in subsets.iter_mut() {
        if subset.len() < per_source {
            return Err(Error::InsufficientData {
                needed: per_source,
                have: subset.len(),
                context: "subset smaller than requested source size",
            });
        }
        subset.shuffle(&mut rng);
        let (take, rest) = subset.split_at(per_source);
        source_sets.push(raw.subset(take));
        leftovers.push(rest.to_vec());
    }
    // Calibration from the union of leftovers, without replacement.
    let mut union: Vec<(usize, usize)> = Vec::new();
    for (s, rest) in leftovers.iter().enumerate() {
        for &idx in rest {
            union.push((s, idx));
        }
    }
    if union.len() < per_source {
        return Err(Error::InsufficientData {
            needed: per_source,
            have: union.len(),
            context: "calibration draw",
        });
    }
    union.shuffle(&mut rng);
    let cal_rows: Vec<usize> = union[..per_source].iter().map(|&(_, idx)| idx).collect();
    let calibration = raw.subset(&cal_rows);
    // Remaining rows, still grouped by subset, form the test pools.
    let mut pool_indices: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &(s, idx) in union[per_source..].iter() {
        pool_indices[s].push(idx);
    }
    let test_pools: Vec<DataSet> = pool_indices
        .iter()
        .map(|rows| raw.subset(rows))
        .collect();
    Ok(SourceCollection {
        sources: source_sets,
        calibration,
        test_pools,
    })
}

/// Draws `n` rows: each row picks source `k` with probability `lambda_k`,
/// then samples that source's pool without replacement.
pub fn sample_mixture(
    pool: &SourceCollection,
    lambda: &[f64],
    n: usize,
    seed: u64,
) -> Result<DataSet> {
    let k = pool.test_pools.len();
    if lambda.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: lambda.len(),
            context: "mixture weight length",
        });
    }
    if lambda.iter().any(|&l| !l.is_finite() || l < 0.0) {
        return Err(Error::NotASimplex(f64::NAN));
    }
    let sum: f64 = lambda.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotASimplex(sum));
    }
    let dim = pool
        .test_pools
        .first()
        .map(|d| d.dim())
        .ok_or(Error::EmptyInput("test pools"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<Vec<usize>> = pool
        .test_pools
        .iter()
        .map(|d| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut pick = k - 1;
        for (s, &l) in lambda.iter().enumerate() {
            acc += l / sum;
            if u < acc {
                pick = s;
                break;
            }
        }
        let idx = remaining[pick].pop().ok_or(Error::InsufficientData {
            needed: 1,
            have: 0,
            context: "mixture pool exhausted",
        })?;
        features.extend_from_slice(pool.test_pools[pick].row(idx));
        labels.push(pool.test_pools[pick].labels()[idx]);
        sources.push(pick);
    }
    if n == 0 {
        return DataSet::new(Vec::new(), dim, Vec::new(), Some(Vec::new()));
    }
    DataSet::new(features, dim, labels, Some(sources))
}

/// Multiplies each label by an independent `U(lo_factor, hi_factor)` draw.
/// Features are untouched.
pub fn perturb_labels(data: &DataSet, lo_factor: f64, hi_factor: f64, seed: u64) -> Result<DataSet> {
    if hi_factor < lo_factor {
        return Err(Error::InvalidParameter(format!(
            "perturbation range inverted: [{lo_factor}, {hi_factor}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<f64> = data
        .labels()
        .iter()
        .map(|&y| {
            let delta = if hi_factor > lo_factor {
                rng.gen_range(lo_factor..hi_factor)
            } else {
                lo_factor
            };
            y * delta
        })
        .collect();
    DataSet::new(
        data.features().to_vec(),
        data.dim(),
        labels,
        data.sources().map(|s| s.to_vec()),
    )
}

/// Role of one CSV column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Feature,
    Label,
    Source,
    Ignore,
}

/// Column-name-to-role mapping. The schema is explicit; nothing is inferred.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: BTreeMap<String, ColumnRole>,
}

impl CsvSchema {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Loads a CSV with a header row into a dataset using the declared roles.
/// Feature columns keep their header order.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<DataSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut feature_cols = Vec::new();
    let mut label_col = None;
    let mut source_col = None;
    let mut seen = Vec::new();
    for (idx, name) in headers.iter().enumerate() {
        seen.push(name.to_string());
        match schema.columns.get(name) {
            Some(ColumnRole::Feature) => feature_cols.push(idx),
            Some(ColumnRole::Label) => {
                if label_col.replace(idx).is_some() {
                    return Err(Error::CsvSchema("more than one label column".into()));
                }
            }
            Some(ColumnRole::Source) => {
                if source_col.replace(idx).is_some() {
                    return Err(Error::CsvSchema("more than one source column".into()));
                }
            }
            Some(ColumnRole::Ignore) => {}
            None => {
                return Err(Error::CsvSchema(format!(
                    "column '{name}' not declared in the schema"
                )))
            }
        }
    }
    for (name, role) in &schema.columns {
        if !seen.iter().any(|s| s == name) && *role != ColumnRole::Ignore {
            return Err(Error::CsvSchema(format!("schema column '{name}' missing from file")));
        }
    }
    let label_col = label_col.ok_or_else(|| Error::CsvSchema("no label column declared".into()))?;
    if feature_cols.is_empty() {
        return Err(Error::CsvSchema("no feature columns declared".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut sources = source_col.map(|_| Vec::new());
    for (row_idx, record) in reader.records().enumerate() {
        let row_number = row_idx + 2; // 1-based, after the header
        let record = record?;
        let parse = |col: usize| -> Result<f64> {
            let cell = record.get(col).ok_or(Error::CsvParse {
                row: row_number,
                message: format!("missing column {col}"),
            })?;
            let value: f64 = cell.trim().parse().map_err(|_| Error::CsvParse {
                row: row_number,
                message: format!("cannot parse '{cell}' as a real number"),
            })?;
            if !value.is_finite() {
                return Err(Error::CsvParse {
                    row: row_number,
                    message: format!("non-finite value '{cell}'"),
                });
            }
            Ok(value)
        };
        for &col in &feature_cols {
            features.push(parse(col)?);
        }
        labels.push(parse(label_col)?);
        if let (Some(out), Some(col)) = (sources.as_mut(), source_col) {
            let cell = record.get(col).unwrap_or("");
            let id: usize = cell.trim().parse().map_err(|_| Error::CsvParse {
                row: row_number,
                message: format!("cannot parse '{cell}' as a source id"),
            })?;
            out.push(id);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("csv file has no data rows"));
    }
    DataSet::new(features, feature_cols.len(), labels, sources)
}

/// Per-column standardization parameters over features and the label.
/// The label occupies the last slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub constant: Vec<bool>,
}

impl StandardizationStats {
    pub fn feature_dim(&self) -> usize {
        self.means.len() - 1
    }

    pub fn apply(&self, data: &DataSet) -> Result<DataSet> {
        if data.dim() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: data.dim(),
                context: "standardization feature dim",
            });
        }
        let d = data.dim();
        let mut features = Vec::with_capacity(data.features().len());
        for i in 0..data.len() {
            for (j, &v) in data.row(i).iter().enumerate() {
                features.push(self.forward_col(j, v));
            }
        }
        let labels: Vec<f64> = data
            .labels()
            .iter()
            .map(|&y| self.forward_col(d, y))
            .collect();
        DataSet::new(features, d, labels, data.sources().map(|s| s.to_vec()))
    }

    pub fn invert(&self, data: &DataSet) -> Result<DataSet> {
        if data.dim() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: data.dim(),
                context: "standardization feature dim",
            });
        }
        let d = data.dim();
        let mut features = Vec::with_capacity(data.features().len());
        for i in 0..data.len() {
            for (j, &v) in data.row(i).iter().enumerate() {
                features.push(self.invert_col(j, v));
            }
        }
        let labels: Vec<f64> = data
            .labels()
            .iter()
            .map(|&y| self.invert_col(d, y))
            .collect();
        DataSet::new(features, d, labels, data.sources().map(|s| s.to_vec()))
    }

    #[inline]
    fn forward_col(&self, col: usize, v: f64) -> f64 {
        if self.constant[col] {
            v
        } else {
            (v - self.means[col]) / self.stds[col]
        }
    }

    #[inline]
    fn invert_col(&self, col: usize, v: f64) -> f64 {
        if self.constant[col] {
            v
        } else {
            v * self.stds[col] + self.means[col]
        }
    }

    /// Maps one standardized label back to original units.
    pub fn invert_label(&self, y: f64) -> f64 {
        self.invert_col(self.feature_dim(), y)
    }

    /// Maps one raw label into standardized units.
    pub fn forward_label(&self, y: f64) -> f64 {
        self.forward_col(self.feature_dim(), y)
    }
}

/// Fits per-column standardization on `data` and returns the standardized
/// copy. Constant columns are flagged and passed through untouched.
pub fn standardize(data: &DataSet) -> Result<(DataSet, StandardizationStats)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("standardize"));
    }
    let d = data.dim();
    let n = data.len() as f64;
    let mut means = vec![0.0; d + 1];
    let mut stds = vec![0.0; d + 1];
    for i in 0..data.len() {
        for (j, &v) in data.row(i).iter().enumerate() {
            means[j] += v;
        }
        means[d] += data.labels()[i];
    }
    means.iter_mut().for_each(|m| *m /= n);
    for i in 0..data.len() {
        for (j, &v) in data.row(i).iter().enumerate() {
            stds[j] += (v - means[j]).powi(2);
        }
        stds[d] += (data.labels()[i] - means[d]).powi(2);
    }
    let mut constant = vec![false; d + 1];
    for (j, s) in stds.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s <= 1e-12 {
            constant[j] = true;
            *s = 1.0;
        }
    }
    let stats = StandardizationStats {
        means,
        stds,
        constant,
    };
    let out = stats.apply(data)?;
    Ok((out, stats))
}
