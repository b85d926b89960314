//! Prediction-set construction: split CP, conformalized quantile regression,
//! importance-weighted CP, worst-case CP, and transported sets built through
//! the branched flow.
//!
//! Empty and unbounded sets are explicit states, never sentinel numbers. The
//! conformal quantile itself uses `f64::INFINITY` for the
//! rank-above-`n` convention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::flows::{BnfModel, BnfVariant};
use crate::neural::{
    pinball_loss, AdamConfig, AdamState, GradientTape, HiddenActivation, Mlp, OutputActivation,
};

/// Conformal scores with optional importance weights and source labels.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub sources: Option<Vec<usize>>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("conformal scores".into()));
        }
        Ok(ScoreSet {
            scores,
            weights: None,
            sources: None,
        })
    }
}

/// How a prediction set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Scp,
    Cqr,
    IwCp,
    WcCp,
    Bnf(BnfVariant),
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Scp => "scp",
            Method::Cqr => "cqr",
            Method::IwCp => "iw-cp",
            Method::WcCp => "wc-cp",
            Method::Bnf(v) => v.label(),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A closed interval in label space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn length(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// The set body: either the whole line or a finite union of ordered,
/// disjoint closed intervals (possibly none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SetBody {
    AllReals,
    Intervals(Vec<Interval>),
}

/// A prediction set with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub body: SetBody,
    pub method: Method,
    pub seed: Option<u64>,
}

impl PredictionSet {
    pub fn all_reals(method: Method) -> Self {
        PredictionSet {
            body: SetBody::AllReals,
            method,
            seed: None,
        }
    }

    pub fn empty(method: Method) -> Self {
        PredictionSet {
            body: SetBody::Intervals(Vec::new()),
            method,
            seed: None,
        }
    }

    pub fn interval(method: Method, lo: f64, hi: f64) -> Self {
        PredictionSet {
            body: SetBody::Intervals(vec![Interval { lo, hi }]),
            method,
            seed: None,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self.body, SetBody::AllReals)
    }

    pub fn is_empty_set(&self) -> bool {
        matches!(&self.body, SetBody::Intervals(v) if v.is_empty())
    }

    pub fn contains(&self, y: f64) -> bool {
        match &self.body {
            SetBody::AllReals => true,
            SetBody::Intervals(v) => v.iter().any(|iv| iv.contains(y)),
        }
    }

    /// Total length over the intervals; `None` for an unbounded set.
    pub fn total_length(&self) -> Option<f64> {
        match &self.body {
            SetBody::AllReals => None,
            SetBody::Intervals(v) => Some(v.iter().map(Interval::length).sum()),
        }
    }

    /// Applies `y -> y * scale + offset` to every endpoint (`scale > 0`),
    /// used to report sets in original label units.
    pub fn map_affine(&self, scale: f64, offset: f64) -> PredictionSet {
        let body = match &self.body {
            SetBody::AllReals => SetBody::AllReals,
            SetBody::Intervals(v) => SetBody::Intervals(
                v.iter()
                    .map(|iv| Interval {
                        lo: iv.lo * scale + offset,
                        hi: iv.hi * scale + offset,
                    })
                    .collect(),
            ),
        };
        PredictionSet {
            body,
            method: self.method,
            seed: self.seed,
        }
    }

    /// `lo:hi` pairs joined by `;`, `*` for the whole line — the interval
    /// list column of the report rows.
    pub fn intervals_field(&self) -> String {
        match &self.body {
            SetBody::AllReals => "*".to_string(),
            SetBody::Intervals(v) => v
                .iter()
                .map(|iv| format!("{}:{}", iv.lo, iv.hi))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

/// The `ceil((1 - alpha) (n + 1))`-th order statistic of the scores, or
/// `+inf` when that rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("conformal scores"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidLevel(alpha));
    }
    let n = scores.len();
    let k = ((1.0 - alpha) * (n + 1) as f64).ceil() as usize;
    if k > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(sorted[k - 1])
}

/// Split-CP set `[h(x) - tau, h(x) + tau]`; the whole line when `tau` is
/// infinite.
pub fn scp_set(h: &Mlp, tau: f64, x: &[f64]) -> Result<PredictionSet> {
    let center = h.forward(x)?[0];
    Ok(interval_set(Method::Scp, center, center, tau))
}

fn interval_set(method: Method, lo_center: f64, hi_center: f64, tau: f64) -> PredictionSet {
    if tau.is_infinite() && tau > 0.0 {
        return PredictionSet::all_reals(method);
    }
    let lo = lo_center - tau;
    let hi = hi_center + tau;
    if lo > hi {
        PredictionSet::empty(method)
    } else {
        PredictionSet::interval(method, lo, hi)
    }
}

/// Feature standardization carried inside a fitted regressor pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(features: &[f64], dim: usize) -> FeatureScaler {
        let n = (features.len() / dim).max(1);
        let mut means = vec![0.0; dim];
        let mut stds = vec![0.0; dim];
        for row in features.chunks(dim) {
            for (j, &v) in row.iter().enumerate() {
                means[j] += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        for row in features.chunks(dim) {
            for (j, &v) in row.iter().enumerate() {
                stds[j] += (v - means[j]).powi(2);
            }
        }
        for s in stds.iter_mut() {
            *s = (*s / n as f64).sqrt();
            if *s <= 1e-12 {
                *s = 1.0;
            }
        }
        FeatureScaler { means, stds }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.means[j]) / self.stds[j])
            .collect()
    }
}

/// Training settings for the pinball regressors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for QuantileTrainConfig {
    fn default() -> Self {
        // Small nets with near-full batches: pinball gradients carry no
        // magnitude information, so wide nets on small batches wiggle.
        QuantileTrainConfig {
            hidden: vec![16],
            epochs: 400,
            batch_size: 4096,
            learning_rate: 5e-2,
            seed: 0,
        }
    }
}

/// Fits one regressor minimizing pinball loss at `level`.
pub fn fit_pinball_regressor(
    train: &DataSet,
    level: f64,
    cfg: &QuantileTrainConfig,
    scaler: &FeatureScaler,
) -> Result<Mlp> {
    if train.is_empty() {
        return Err(Error::EmptyInput("regressor training data"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (level.to_bits().rotate_left(17)));
    let mut sizes = vec![train.dim()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(1);
    let mut mlp = Mlp::new(
        &sizes,
        HiddenActivation::LeakyRelu,
        OutputActivation::Identity,
        &mut rng,
    )?;
    let mut adam = AdamState::new(mlp.param_count(), AdamConfig::with_lr(cfg.learning_rate));
    let scaled: Vec<Vec<f64>> = (0..train.len()).map(|i| scaler.apply(train.row(i))).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        // Linear decay to a tenth of the initial rate tightens the final
        // quantile estimates.
        let frac = epoch as f64 / cfg.epochs.max(1) as f64;
        adam.config.learning_rate = cfg.learning_rate * (1.0 - 0.9 * frac);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut tape = GradientTape::zeros_like(&mlp);
            for &i in chunk {
                let cache = mlp.forward_cached(&scaled[i])?;
                let pred = cache.output()[0];
                let (loss, grad) = pinball_loss(pred, train.labels()[i], level)?;
                epoch_loss += loss;
                mlp.backward_cached_into(&scaled[i], &cache, &[grad], &mut tape)?;
            }
            tape.scale(1.0 / chunk.len() as f64);
            mlp.adam_step(&tape, &mut adam)?;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::RegressorDiverged(format!(
                "non-finite pinball loss at level {level}"
            )));
        }
    }
    Ok(mlp)
}

/// A fitted pair of quantile regressors with its standardization.
#[derive(Debug, Clone)]
pub struct QuantilePair {
    pub h_lo: Mlp,
    pub h_hi: Mlp,
    pub alpha: f64,
    pub scaler: FeatureScaler,
}

impl QuantilePair {
    pub fn lo_level(&self) -> f64 {
        self.alpha / 2.0
    }

    pub fn hi_level(&self) -> f64 {
        1.0 - self.alpha / 2.0
    }

    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let scaled = self.scaler.apply(x);
        let lo = self.h_lo.forward(&scaled)?[0];
        let hi = self.h_hi.forward(&scaled)?[0];
        Ok((lo, hi))
    }
}

/// Trains the two pinball regressors at levels `alpha/2` and `1 - alpha/2`.
pub fn cqr_fit(train: &DataSet, alpha: f64, cfg: &QuantileTrainConfig) -> Result<QuantilePair> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidLevel(alpha));
    }
    let scaler = FeatureScaler::fit(train.features(), train.dim());
    let h_lo = fit_pinball_regressor(train, alpha / 2.0, cfg, &scaler)?;
    let h_hi = fit_pinball_regressor(train, 1.0 - alpha / 2.0, cfg, &scaler)?;
    let pair = QuantilePair {
        h_lo,
        h_hi,
        alpha,
        scaler,
    };
    // Sanity: the upper regressor must sit above the lower one on average.
    let mut below_lo = 0usize;
    let mut below_hi = 0usize;
    for i in 0..train.len() {
        let (lo, hi) = pair.predict(train.row(i))?;
        let y = train.labels()[i];
        if y < lo {
            below_lo += 1;
        }
        if y < hi {
            below_hi += 1;
        }
    }
    if below_hi <= below_lo {
        return Err(Error::RegressorDiverged(
            "upper quantile regressor does not dominate the lower one".into(),
        ));
    }
    Ok(pair)
}

/// CQR conformal scores `max(h_lo(x) - y, y - h_hi(x))`; may be negative.
pub fn cqr_scores(pair: &QuantilePair, cal: &DataSet) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(cal.len());
    for i in 0..cal.len() {
        let (lo, hi) = pair.predict(cal.row(i))?;
        let y = cal.labels()[i];
        scores.push((lo - y).max(y - hi));
    }
    Ok(scores)
}

/// CQR set `[h_lo(x) - tau, h_hi(x) + tau]`, possibly empty for negative
/// `tau`, the whole line for infinite `tau`.
pub fn cqr_set(pair: &QuantilePair, tau: f64, x: &[f64]) -> Result<PredictionSet> {
    let (lo, hi) = pair.predict(x)?;
    Ok(interval_set(Method::Cqr, lo, hi, tau))
}

/// Weighted conformal quantile with explicit mass at `+inf`: the smallest
/// score whose normalized cumulative weight reaches `level`.
pub fn weighted_quantile_with_tail(
    scores: &[f64],
    weights: &[f64],
    tail_weight: f64,
    level: f64,
) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("weighted quantile scores"));
    }
    if scores.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: weights.len(),
            context: "weighted quantile weights",
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) || tail_weight < 0.0 {
        return Err(Error::DegenerateWeights("negative or non-finite weight"));
    }
    let mass: f64 = weights.iter().sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateWeights("all weights zero"));
    }
    let total = mass + tail_weight;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        if cum / total >= level {
            return Ok(scores[i]);
        }
    }
    Ok(f64::INFINITY)
}

/// Weighted quantile with the `+inf` mass set to the mean weight, which makes
/// uniform weights reduce exactly to [`conformal_quantile`].
pub fn weighted_quantile(scores: &[f64], weights: &[f64], level: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::EmptyInput("weighted quantile weights"));
    }
    let tail = weights.iter().sum::<f64>() / weights.len() as f64;
    weighted_quantile_with_tail(scores, weights, tail, level)
}

const RATIO_CLIP: (f64, f64) = (1e-3, 1e3);

/// Importance-weighted CP: fits a logistic calibration-vs-test classifier on
/// features, converts its odds into density ratios (clipped), and returns one
/// weighted conformal quantile per test point.
pub fn iw_cp_tau(
    cal_features: &[f64],
    cal_scores: &[f64],
    test_features: &[f64],
    dim: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    if dim == 0 || cal_features.len() % dim != 0 || test_features.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: cal_features.len(),
            context: "feature matrix not divisible by dim",
        });
    }
    let n_cal = cal_features.len() / dim;
    let n_test = test_features.len() / dim;
    if n_cal == 0 || cal_scores.len() != n_cal {
        return Err(Error::EmptyInput("IW-CP calibration data"));
    }
    if n_test == 0 {
        return Err(Error::EmptyInput("IW-CP test data"));
    }

    // Logistic probabilistic classifier, label 1 = test.
    let mut combined = Vec::with_capacity(cal_features.len() + test_features.len());
    combined.extend_from_slice(cal_features);
    combined.extend_from_slice(test_features);
    let scaler = FeatureScaler::fit(&combined, dim);
    let rows: Vec<Vec<f64>> = combined.chunks(dim).map(|r| scaler.apply(r)).collect();
    let labels: Vec<f64> = (0..n_cal + n_test)
        .map(|i| if i < n_cal { 0.0 } else { 1.0 })
        .collect();

    let mut theta = vec![0.0; dim + 1]; // bias last
    let mut adam = AdamState::new(dim + 1, AdamConfig::with_lr(0.05));
    let n_total = (n_cal + n_test) as f64;
    for _ in 0..300 {
        let mut grad = vec![0.0; dim + 1];
        for (row, &label) in rows.iter().zip(&labels) {
            let logit = crate::neural::dot(&theta[..dim], row) + theta[dim];
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = p - label;
            for (g, &v) in grad.iter_mut().zip(row.iter()) {
                *g += err * v;
            }
            grad[dim] += err;
        }
        grad.iter_mut().for_each(|g| *g /= n_total);
        adam.step(&mut theta, &grad)?;
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::DegenerateClassifier("logistic fit diverged"));
    }

    // Density ratio q(x)/p(x) = odds * n_cal / n_test, clipped.
    let prior = n_cal as f64 / n_test as f64;
    let ratio = |row: &[f64]| -> f64 {
        let logit = crate::neural::dot(&theta[..dim], row) + theta[dim];
        (logit.exp() * prior).clamp(RATIO_CLIP.0, RATIO_CLIP.1)
    };
    let cal_w: Vec<f64> = rows[..n_cal].iter().map(|r| ratio(r)).collect();
    let mut taus = Vec::with_capacity(n_test);
    for row in rows[n_cal..].iter() {
        let w_test = ratio(row);
        taus.push(weighted_quantile_with_tail(
            cal_scores,
            &cal_w,
            w_test,
            1.0 - alpha,
        )?);
    }
    Ok(taus)
}

/// Worst-case CP over sources: the largest per-source conformal quantile.
pub fn wc_cp_tau(source_scores: &[Vec<f64>], alpha: f64) -> Result<f64> {
    if source_scores.is_empty() {
        return Err(Error::EmptyInput("worst-case CP score sets"));
    }
    let mut tau = f64::NEG_INFINITY;
    for scores in source_scores {
        tau = tau.max(conformal_quantile(scores, alpha)?);
    }
    Ok(tau)
}

/// Label-space scan grid for the transported sets.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridConfig {
    pub y_min: f64,
    pub y_max: f64,
    pub n_points: usize,
}

impl GridConfig {
    /// `[min - 2 range, max + 2 range]` of the given labels, 1000 candidates.
    pub fn from_labels(labels: &[f64]) -> Result<GridConfig> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("grid labels"));
        }
        let min = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = if max > min { max - min } else { 1.0 };
        Ok(GridConfig {
            y_min: min - 2.0 * range,
            y_max: max + 2.0 * range,
            n_points: 1000,
        })
    }

    pub fn step(&self) -> f64 {
        (self.y_max - self.y_min) / (self.n_points - 1) as f64
    }

    pub fn candidate(&self, k: usize) -> f64 {
        self.y_min + self.step() * k as f64
    }
}

/// Transported prediction set.
///
/// Normalizes the input through the feature branch, builds the CQR base set
/// there, and pulls it back through the label branch: the plain variant maps
/// the interval endpoints through the monotone inverse; augmented variants
/// scan the candidate grid and keep the values whose transform lands in the
/// base set, coalescing adjacent candidates with a half-step margin.
///
/// The conditioner noise is seeded by a hash of the input coordinates XORed
/// with `run_seed`, so equal inputs always yield identical sets.
pub fn bnf_set(
    model: &BnfModel,
    pair: &QuantilePair,
    tau: f64,
    x: &[f64],
    run_seed: u64,
    grid: &GridConfig,
    source_id: Option<usize>,
) -> Result<PredictionSet> {
    let method = Method::Bnf(model.variant());
    let x_bar = model.transform_x(x)?;
    if tau.is_infinite() && tau > 0.0 {
        let mut set = PredictionSet::all_reals(method);
        set.seed = Some(crate::flows::hash_coordinates(x) ^ run_seed);
        return Ok(set);
    }
    let (lo, hi) = pair.predict(&x_bar)?;
    let base_lo = lo - tau;
    let base_hi = hi + tau;
    if base_lo > base_hi {
        let mut set = PredictionSet::empty(method);
        set.seed = Some(crate::flows::hash_coordinates(x) ^ run_seed);
        return Ok(set);
    }

    if model.variant() == BnfVariant::Plain {
        // Monotone increasing label branch: endpoints map order-preservingly.
        let y_lo = model.invert_y(base_lo, None)?;
        let y_hi = model.invert_y(base_hi, None)?;
        let mut set = PredictionSet::interval(method, y_lo, y_hi);
        set.seed = Some(crate::flows::hash_coordinates(x) ^ run_seed);
        return Ok(set);
    }

    let (eps, seed) = model.noise_for_input(x, run_seed, source_id)?;
    let cond = model.conditioner(x, Some(eps))?;
    let step = grid.step();
    let mut intervals: Vec<Interval> = Vec::new();
    let mut run_start: Option<f64> = None;
    let mut run_end = 0.0;
    for k in 0..grid.n_points {
        let y = grid.candidate(k);
        let y_bar = model.transform_y(y, cond)?;
        let keep = base_lo <= y_bar && y_bar <= base_hi;
        if keep {
            if run_start.is_none() {
                run_start = Some(y);
            }
            run_end = y;
        } else if let Some(start) = run_start.take() {
            intervals.push(Interval {
                lo: start - 0.5 * step,
                hi: run_end + 0.5 * step,
            });
        }
    }
    if let Some(start) = run_start {
        intervals.push(Interval {
            lo: start - 0.5 * step,
            hi: run_end + 0.5 * step,
        });
    }
    Ok(PredictionSet {
        body: SetBody::Intervals(intervals),
        method,
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::BnfArchitecture;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn conformal_quantile_hand_values() {
        // {1,2,3,4}, alpha 0.5: k = ceil(2.5) = 3 -> 3
        assert_eq!(conformal_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 3.0);
        // alpha 0.1: k = ceil(4.5) = 5 > 4 -> +inf
        assert!(conformal_quantile(&[1.0, 2.0, 3.0, 4.0], 0.1)
            .unwrap()
            .is_infinite());
        // single score, alpha 0.6: k = ceil(0.8) = 1 -> 7
        assert_eq!(conformal_quantile(&[7.0], 0.6).unwrap(), 7.0);
        assert!(conformal_quantile(&[], 0.5).is_err());
        assert!(conformal_quantile(&[1.0], 0.0).is_err());
    }

    /// Naive oracle: sort, then walk ranks until the share of
    /// calibration-plus-one reaches the level.
    fn naive_quantile(scores: &[f64], alpha: f64) -> f64 {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        for (idx, &s) in sorted.iter().enumerate() {
            if (idx + 1) as f64 / (n + 1) as f64 >= 1.0 - alpha {
                return s;
            }
        }
        f64::INFINITY
    }

    #[test]
    fn rank_correctness_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=12 {
            for step in 1..19 {
                let alpha = step as f64 * 0.05;
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let fast = conformal_quantile(&scores, alpha).unwrap();
                let slow = naive_quantile(&scores, alpha);
                assert_eq!(fast, slow, "n={n} alpha={alpha}");
            }
        }
    }

    #[test]
    fn quantile_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..10.0)).collect();
        let mut last = f64::INFINITY;
        for step in 1..19 {
            let alpha = step as f64 * 0.05;
            let tau = conformal_quantile(&scores, alpha).unwrap();
            assert!(tau <= last, "tau must shrink as alpha grows");
            last = tau;
        }
    }

    fn constant_net(c: f64, dim: usize) -> Mlp {
        Mlp::from_parts(
            vec![dim, 1],
            vec![vec![0.0; dim]],
            vec![vec![c]],
            HiddenActivation::LeakyRelu,
            OutputActivation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn scp_set_hand_values() {
        let h = constant_net(2.0, 1);
        let s = scp_set(&h, 0.0, &[0.3]).unwrap();
        assert_eq!(
            s.body,
            SetBody::Intervals(vec![Interval { lo: 2.0, hi: 2.0 }])
        );
        let s = scp_set(&h, 1.0, &[0.3]).unwrap();
        assert_eq!(
            s.body,
            SetBody::Intervals(vec![Interval { lo: 1.0, hi: 3.0 }])
        );
        let s = scp_set(&h, f64::INFINITY, &[0.3]).unwrap();
        assert!(s.is_unbounded());
        assert!(s.contains(1e12));
    }

    fn hand_pair(lo_c: f64, hi_c: f64) -> QuantilePair {
        QuantilePair {
            h_lo: constant_net(lo_c, 1),
            h_hi: constant_net(hi_c, 1),
            alpha: 0.2,
            scaler: FeatureScaler {
                means: vec![0.0],
                stds: vec![1.0],
            },
        }
    }

    /// Constant pair over 2-D inputs (for identity-model tests where the
    /// lifted feature vector has an extra coordinate).
    fn hand_pair_2d(lo_c: f64, hi_c: f64) -> QuantilePair {
        QuantilePair {
            h_lo: constant_net(lo_c, 2),
            h_hi: constant_net(hi_c, 2),
            alpha: 0.2,
            scaler: FeatureScaler {
                means: vec![0.0, 0.0],
                stds: vec![1.0, 1.0],
            },
        }
    }

    #[test]
    fn cqr_scores_hand_values() {
        let pair = hand_pair(0.0, 1.0);
        let data = DataSet::new(vec![0.0, 0.0, 0.0], 1, vec![2.0, -0.5, 0.5], None).unwrap();
        let scores = cqr_scores(&pair, &data).unwrap();
        assert_eq!(scores[0], 1.0); // y above hi by 1
        assert_eq!(scores[1], 0.5); // y below lo by 0.5
        assert_eq!(scores[2], -0.5); // inside, equidistant -> negative
    }

    #[test]
    fn cqr_set_hand_values() {
        let pair = hand_pair(1.0, 2.0);
        let s = cqr_set(&pair, 0.0, &[0.0]).unwrap();
        assert_eq!(
            s.body,
            SetBody::Intervals(vec![Interval { lo: 1.0, hi: 2.0 }])
        );
        let s = cqr_set(&pair, 0.5, &[0.0]).unwrap();
        assert_eq!(
            s.body,
            SetBody::Intervals(vec![Interval { lo: 0.5, hi: 2.5 }])
        );
        // negative tau beyond the half-gap empties the set
        let s = cqr_set(&pair, -0.75, &[0.0]).unwrap();
        assert!(s.is_empty_set());
        assert!(!s.contains(1.5));
    }

    #[test]
    fn cqr_fit_constant_labels() {
        let n = 400;
        let features: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let labels = vec![3.0; n];
        let data = DataSet::new(features, 1, labels, None).unwrap();
        let cfg = QuantileTrainConfig {
            epochs: 500,
            learning_rate: 3e-2,
            ..Default::default()
        };
        // Constant targets leave no quantile spread; the dominance check may
        // reject the degenerate fit, but fitted values must approach c.
        let pair = match cqr_fit(&data, 0.2, &cfg) {
            Ok(p) => p,
            Err(Error::RegressorDiverged(_)) => return,
            Err(e) => panic!("unexpected error {e}"),
        };
        let (lo, hi) = pair.predict(&[0.5]).unwrap();
        assert!((lo - 3.0).abs() <= 0.05, "h_lo {lo}");
        assert!((hi - 3.0).abs() <= 0.05, "h_hi {hi}");
    }

    #[test]
    fn cqr_fit_gaussian_quantiles() {
        // Labels N(0,1) independent of x; at alpha = 0.2 the regressors
        // approach the 0.1/0.9 Gaussian quantiles -1.2816 / 1.2816.
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let data = DataSet::new(features, 1, labels, None).unwrap();
        let pair = cqr_fit(&data, 0.2, &QuantileTrainConfig::default()).unwrap();
        for x in [-0.5, 0.0, 0.5] {
            let (lo, hi) = pair.predict(&[x]).unwrap();
            assert!((hi - 1.2816).abs() <= 0.15, "h_hi {hi} at x={x}");
            assert!((lo + 1.2816).abs() <= 0.15, "h_lo {lo} at x={x}");
        }
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
            let mut r = vec![0.0; v.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let ra = rank(a);
        let rb = rank(b);
        let n = a.len() as f64;
        let mean = (n - 1.0) / 2.0;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..a.len() {
            num += (ra[i] - mean) * (rb[i] - mean);
            da += (ra[i] - mean).powi(2);
            db += (rb[i] - mean).powi(2);
        }
        num / (da.sqrt() * db.sqrt())
    }

    #[test]
    fn cqr_fit_heteroscedastic_widths_track_noise() {
        // y = x * eps: interval width must grow with |x|.
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let eps: f64 = StandardNormal.sample(&mut rng);
            features.push(x);
            labels.push(x * eps);
        }
        let data = DataSet::new(features, 1, labels, None).unwrap();
        let pair = cqr_fit(&data, 0.2, &QuantileTrainConfig::default()).unwrap();
        let xs: Vec<f64> = (0..41).map(|k| -2.0 + 0.1 * k as f64).collect();
        let widths: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let (lo, hi) = pair.predict(&[x]).unwrap();
                hi - lo
            })
            .collect();
        let abs_x: Vec<f64> = xs.iter().map(|x| x.abs()).collect();
        let rho = spearman(&abs_x, &widths);
        assert!(rho > 0.8, "rank correlation {rho}");
    }

    #[test]
    fn weighted_quantile_hand_values() {
        // uniform weights reduce to the plain conformal quantile
        let scores = [1.0, 2.0, 3.0, 4.0];
        for step in 1..19 {
            let alpha = step as f64 * 0.05;
            let plain = conformal_quantile(&scores, alpha).unwrap();
            let weighted = weighted_quantile(&scores, &[1.0; 4], 1.0 - alpha).unwrap();
            assert_eq!(plain, weighted, "alpha {alpha}");
        }
        // {1,2} with weights {3,1} at level 0.5 -> 1
        assert_eq!(
            weighted_quantile(&[1.0, 2.0], &[3.0, 1.0], 0.5).unwrap(),
            1.0
        );
        // all weight on one score -> that score (mid level)
        assert_eq!(
            weighted_quantile(&[1.0, 2.0], &[0.0, 5.0], 0.5).unwrap(),
            2.0
        );
        assert!(weighted_quantile(&[1.0], &[0.0], 0.5).is_err());
    }

    #[test]
    fn wc_cp_hand_values() {
        // K = 1 reduces to the plain quantile
        assert_eq!(
            wc_cp_tau(&[vec![1.0, 2.0, 3.0, 4.0]], 0.5).unwrap(),
            conformal_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap()
        );
        // max over sources
        assert_eq!(
            wc_cp_tau(
                &[vec![1.0, 2.0, 3.0, 4.0], vec![10.0, 20.0, 30.0, 40.0]],
                0.5
            )
            .unwrap(),
            30.0
        );
        // identical sources match the single-source value
        assert_eq!(
            wc_cp_tau(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]], 0.5).unwrap(),
            wc_cp_tau(&[vec![1.0, 2.0, 3.0]], 0.5).unwrap()
        );
        assert!(wc_cp_tau(&[vec![]], 0.5).is_err());
        assert!(wc_cp_tau(&[], 0.5).is_err());
    }

    #[test]
    fn wc_cp_dominates_each_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let sets: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..10).map(|_| rng.gen_range(0.0..5.0)).collect())
                .collect();
            let tau = wc_cp_tau(&sets, 0.3).unwrap();
            for s in &sets {
                assert!(tau >= conformal_quantile(s, 0.3).unwrap());
            }
        }
    }

    #[test]
    fn iw_cp_no_shift_matches_scp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1000;
        let dim = 1;
        let cal: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let test: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let alpha = 0.1;
        let plain = conformal_quantile(&scores, alpha).unwrap();
        let taus = iw_cp_tau(&cal, &scores, &test, dim, alpha).unwrap();
        for tau in taus {
            assert!(
                (tau - plain).abs() <= 0.05 * plain,
                "iw tau {tau} vs scp {plain}"
            );
        }
    }

    #[test]
    fn iw_cp_point_mass_tracks_cluster() {
        // Two feature clusters with very different score scales. Test points
        // sitting on cluster B should pull tau toward B's quantile.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n_half = 400;
        let mut cal = Vec::new();
        let mut scores = Vec::new();
        for _ in 0..n_half {
            cal.push(rng.gen_range(-0.1..0.1)); // cluster A at 0
            scores.push(rng.gen_range(0.0..0.5));
        }
        for _ in 0..n_half {
            cal.push(5.0 + rng.gen_range(-0.1..0.1)); // cluster B at 5
            scores.push(rng.gen_range(4.0..5.0));
        }
        let test: Vec<f64> = (0..200).map(|_| 5.0 + rng.gen_range(-0.1..0.1)).collect();
        let alpha = 0.2;
        let taus = iw_cp_tau(&cal, &scores, &test, 1, alpha).unwrap();
        let b_scores: Vec<f64> = scores[n_half..].to_vec();
        let b_quantile = conformal_quantile(&b_scores, alpha).unwrap();
        let pooled = conformal_quantile(&scores, alpha).unwrap();
        for tau in taus {
            assert!(
                (tau - b_quantile).abs() < (pooled - b_quantile).abs(),
                "tau {tau} should sit closer to the cluster quantile {b_quantile} than the pooled {pooled}"
            );
        }
    }

    #[test]
    fn iw_cp_zero_test_errors() {
        assert!(matches!(
            iw_cp_tau(&[0.0, 1.0], &[0.5, 0.6], &[], 1, 0.1),
            Err(Error::EmptyInput(_))
        ));
    }

    fn identity_model(variant: BnfVariant) -> BnfModel {
        let arch = BnfArchitecture {
            layers_per_branch: 4,
            subnet_hidden: vec![8, 8],
            scale_cap: 2.0,
            augment_univariate: true,
            planar_units: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        BnfModel::new(variant, 1, 1, &arch, &mut rng).unwrap()
    }

    fn randomized_model(variant: BnfVariant, seed: u64) -> BnfModel {
        let mut model = identity_model(variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.x_branch().param_count();
        let flat: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.4..0.4)).collect();
        model.x_branch_mut().set_flat_params(&flat).unwrap();
        if let crate::flows::YBranch::Coupling(stack) = model.y_branch_mut() {
            let n = stack.param_count();
            let flat: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.4..0.4)).collect();
            stack.set_flat_params(&flat).unwrap();
        }
        model
    }

    #[test]
    fn bnf_set_identity_matches_cqr_within_grid_step() {
        let model = identity_model(BnfVariant::Augmented);
        let pair = hand_pair_2d(-1.0, 1.0);
        let grid = GridConfig {
            y_min: -5.0,
            y_max: 5.0,
            n_points: 1000,
        };
        // Identity model: the pair is constant in x, so the base set equals
        // the plain CQR set regardless of the lift coordinate.
        let tau = 0.25;
        let set = bnf_set(&model, &pair, tau, &[0.4], 9, &grid, None).unwrap();
        let step = grid.step();
        match &set.body {
            SetBody::Intervals(got) => {
                assert_eq!(got.len(), 1);
                assert!(
                    (got[0].lo - (-1.0 - tau)).abs() <= step,
                    "lo {} vs {}",
                    got[0].lo,
                    -1.0 - tau
                );
                assert!((got[0].hi - (1.0 + tau)).abs() <= step);
            }
            _ => panic!("expected a bounded set"),
        }
    }

    #[test]
    fn bnf_set_membership_equivalence_exact() {
        // For every grid candidate: y in set <=> transform(y) in base set.
        for seed in 0..6 {
            let model = randomized_model(BnfVariant::Augmented, 100 + seed);
            let pair = hand_pair_2d(-0.6, 0.6);
            let grid = GridConfig {
                y_min: -4.0,
                y_max: 4.0,
                n_points: 1000,
            };
            let tau = 0.2;
            let x = [0.3];
            let run_seed = 77;
            let set = bnf_set(&model, &pair, tau, &x, run_seed, &grid, None).unwrap();
            let (eps, _) = model.noise_for_input(&x, run_seed, None).unwrap();
            let cond = model.conditioner(&x, Some(eps)).unwrap();
            let x_bar = model.transform_x(&x).unwrap();
            let (lo, hi) = pair.predict(&x_bar).unwrap();
            for k in 0..grid.n_points {
                let y = grid.candidate(k);
                let y_bar = model.transform_y(y, cond).unwrap();
                let in_base = lo - tau <= y_bar && y_bar <= hi + tau;
                assert_eq!(
                    set.contains(y),
                    in_base,
                    "candidate {y} (seed {seed}): set {} base {in_base}",
                    set.contains(y)
                );
            }
        }
    }

    #[test]
    fn bnf_set_plain_variant_maps_endpoints() {
        let model = randomized_model(BnfVariant::Plain, 11);
        let pair = hand_pair_2d(-0.5, 0.5);
        let grid = GridConfig {
            y_min: -4.0,
            y_max: 4.0,
            n_points: 1000,
        };
        let tau = 0.1;
        let set = bnf_set(&model, &pair, tau, &[0.2], 5, &grid, None).unwrap();
        match &set.body {
            SetBody::Intervals(v) => {
                assert_eq!(v.len(), 1);
                let fwd_lo = model.transform_y(v[0].lo, None).unwrap();
                let fwd_hi = model.transform_y(v[0].hi, None).unwrap();
                assert!((fwd_lo - (-0.5 - tau)).abs() <= 1e-6);
                assert!((fwd_hi - (0.5 + tau)).abs() <= 1e-6);
                assert!(v[0].lo < v[0].hi);
            }
            _ => panic!("expected a bounded interval"),
        }
    }

    #[test]
    fn bnf_set_unbounded_and_empty_propagate() {
        let model = identity_model(BnfVariant::Augmented);
        let pair = hand_pair_2d(-1.0, 1.0);
        let grid = GridConfig {
            y_min: -5.0,
            y_max: 5.0,
            n_points: 100,
        };
        let set = bnf_set(&model, &pair, f64::INFINITY, &[0.1], 3, &grid, None).unwrap();
        assert!(set.is_unbounded());
        let set = bnf_set(&model, &pair, -2.0, &[0.1], 3, &grid, None).unwrap();
        assert!(set.is_empty_set());
    }

    #[test]
    fn bnf_set_deterministic_per_input_and_seed() {
        let model = randomized_model(BnfVariant::Augmented, 21);
        let pair = hand_pair_2d(-0.8, 0.8);
        let grid = GridConfig {
            y_min: -4.0,
            y_max: 4.0,
            n_points: 500,
        };
        let a = bnf_set(&model, &pair, 0.3, &[0.7], 123, &grid, None).unwrap();
        let b = bnf_set(&model, &pair, 0.3, &[0.7], 123, &grid, None).unwrap();
        assert_eq!(a, b, "equal (x, seed) must be bit-identical");
        let c = bnf_set(&model, &pair, 0.3, &[0.7], 124, &grid, None).unwrap();
        assert_eq!(a.method, c.method);
        assert_ne!(a.seed, c.seed);
    }

    #[test]
    fn prediction_set_affine_map() {
        let set = PredictionSet::interval(Method::Cqr, -1.0, 2.0);
        let mapped = set.map_affine(2.0, 1.0);
        assert_eq!(
            mapped.body,
            SetBody::Intervals(vec![Interval { lo: -1.0, hi: 5.0 }])
        );
        assert_eq!(mapped.total_length(), Some(6.0));
        assert_eq!(set.intervals_field(), "-1:2");
    }
}
