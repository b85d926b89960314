//! The branched transport model.
//!
//! Two invertible branches with unshared parameters: the feature branch maps
//! `x` alone, so a test input can be normalized without its label, and the
//! label branch maps `y` together with a conditioner coordinate that depends
//! on the variant (nothing, Gaussian noise, source-shifted Gaussian noise, or
//! a frozen linear projection of the features).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::coupling::{CouplingScratch, FlowStack};
use super::planar::PlanarFlow1D;
use crate::error::{Error, Result};

/// Which label-branch construction the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnfVariant {
    /// Monotone univariate label branch; prediction-set endpoints map
    /// through the analytic inverse.
    Plain,
    /// Label branch over `(y, eps)` with `eps ~ N(0,1)`.
    Augmented,
    /// Like `Augmented` but `eps ~ N(3k, 1)` for source `k`.
    AugmentConditioned,
    /// Conditioner is a frozen unit-norm projection of the features.
    FeatureConditioned,
}

impl BnfVariant {
    pub fn label(&self) -> &'static str {
        match self {
            BnfVariant::Plain => "bnf-plain",
            BnfVariant::Augmented => "bnf-aug",
            BnfVariant::AugmentConditioned => "bnf-aug-cond",
            BnfVariant::FeatureConditioned => "bnf-feat",
        }
    }
}

/// Spacing between the source-conditioned noise means.
pub const SOURCE_NOISE_SPACING: f64 = 3.0;

/// Architecture settings shared by both branches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnfArchitecture {
    pub layers_per_branch: usize,
    pub subnet_hidden: Vec<usize>,
    pub scale_cap: f64,
    /// Lift 1-D features with one seeded standard-normal coordinate instead
    /// of rejecting them.
    pub augment_univariate: bool,
    pub planar_units: usize,
}

impl Default for BnfArchitecture {
    fn default() -> Self {
        BnfArchitecture {
            layers_per_branch: 48,
            subnet_hidden: vec![64, 128, 256, 128, 64],
            scale_cap: 2.0,
            augment_univariate: false,
            planar_units: 16,
        }
    }
}

/// The two-branch invertible transport model.
#[derive(Debug, Clone)]
pub struct BnfModel {
    variant: BnfVariant,
    feature_dim: usize,
    feature_augmented: bool,
    lift_seed: u64,
    x_branch: FlowStack,
    y_branch: YBranch,
    source_noise_means: Vec<f64>,
    projection: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum YBranch {
    Planar(PlanarFlow1D),
    Coupling(FlowStack),
}

/// FNV-1a over the coordinate bit patterns; the per-input seed that makes
/// stochastic prediction sets repeatable.
pub fn hash_coordinates(x: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in x {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

impl BnfModel {
    /// Builds a model with identity-initialized branches.
    ///
    /// `n_sources` is only consulted by the augment-conditioned variant.
    pub fn new(
        variant: BnfVariant,
        feature_dim: usize,
        n_sources: usize,
        arch: &BnfArchitecture,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidParameter("feature_dim must be >= 1".into()));
        }
        let feature_augmented = feature_dim == 1;
        if feature_augmented && !arch.augment_univariate {
            return Err(Error::InvalidParameter(
                "coupling layers need at least 2 feature dimensions; \
                 set augment_univariate to lift 1-D features with a seeded \
                 normal coordinate"
                    .into(),
            ));
        }
        let x_dim = if feature_augmented {
            2
        } else {
            feature_dim
        };
        let x_branch = FlowStack::new(
            x_dim,
            arch.layers_per_branch,
            &arch.subnet_hidden,
            arch.scale_cap,
            rng,
        )?;
        let y_branch = match variant {
            BnfVariant::Plain => YBranch::Planar(PlanarFlow1D::new(arch.planar_units, rng)?),
            _ => YBranch::Coupling(FlowStack::new(
                2,
                arch.layers_per_branch,
                &arch.subnet_hidden,
                arch.scale_cap,
                rng,
            )?),
        };
        let source_noise_means = if variant == BnfVariant::AugmentConditioned {
            if n_sources == 0 {
                return Err(Error::InvalidParameter(
                    "augment-conditioned variant needs n_sources >= 1".into(),
                ));
            }
            (0..n_sources)
                .map(|k| SOURCE_NOISE_SPACING * k as f64)
                .collect()
        } else {
            Vec::new()
        };
        let projection = if variant == BnfVariant::FeatureConditioned {
            let mut v: Vec<f64> = (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            Some(v)
        } else {
            None
        };
        Ok(BnfModel {
            variant,
            feature_dim,
            feature_augmented,
            lift_seed: rng.gen(),
            x_branch,
            y_branch,
            source_noise_means,
            projection,
        })
    }

    pub fn variant(&self) -> BnfVariant {
        self.variant
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_augmented(&self) -> bool {
        self.feature_augmented
    }

    pub fn lift_seed(&self) -> u64 {
        self.lift_seed
    }

    /// Dimension the feature branch operates in (`d`, or `d + 1` when 1-D
    /// features are lifted).
    pub fn x_dim(&self) -> usize {
        self.x_branch.dim()
    }

    pub fn x_branch(&self) -> &FlowStack {
        &self.x_branch
    }

    pub fn x_branch_mut(&mut self) -> &mut FlowStack {
        &mut self.x_branch
    }

    pub fn y_branch(&self) -> &YBranch {
        &self.y_branch
    }

    pub fn y_branch_mut(&mut self) -> &mut YBranch {
        &mut self.y_branch
    }

    pub fn source_noise_means(&self) -> &[f64] {
        &self.source_noise_means
    }

    pub fn projection(&self) -> Option<&[f64]> {
        self.projection.as_deref()
    }

    /// Rebuilds a model from serialized parts (checkpoint loading).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        variant: BnfVariant,
        feature_dim: usize,
        feature_augmented: bool,
        lift_seed: u64,
        x_branch: FlowStack,
        y_branch: YBranch,
        source_noise_means: Vec<f64>,
        projection: Option<Vec<f64>>,
    ) -> Self {
        BnfModel {
            variant,
            feature_dim,
            feature_augmented,
            lift_seed,
            x_branch,
            y_branch,
            source_noise_means,
            projection,
        }
    }

    fn check_feature_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
                context: "feature vector",
            });
        }
        Ok(())
    }

    /// Features as seen by the feature branch: the raw vector, plus one
    /// seeded standard-normal coordinate when 1-D features are lifted. The
    /// extra coordinate is a pure function of `x`, so every pipeline stage
    /// sees the same lift.
    pub fn lifted_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_feature_dim(x)?;
        let mut out = x.to_vec();
        if self.feature_augmented {
            let mut rng = ChaCha8Rng::seed_from_u64(hash_coordinates(x) ^ self.lift_seed);
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(z);
        }
        Ok(out)
    }

    /// Mean of the conditioner noise law for this variant.
    pub fn noise_mean(&self, source_id: Option<usize>) -> Result<f64> {
        match self.variant {
            BnfVariant::AugmentConditioned => {
                let k = source_id.ok_or(Error::MissingVariantInput(
                    "a source id (augment-conditioned noise law)",
                ))?;
                self.source_noise_means.get(k).copied().ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "source id {k} out of range ({} sources)",
                        self.source_noise_means.len()
                    ))
                })
            }
            _ => Ok(0.0),
        }
    }

    /// Draws conditioner noise for one sample from the variant's law.
    pub fn draw_noise(&self, rng: &mut ChaCha8Rng, source_id: Option<usize>) -> Result<f64> {
        let mean = self.noise_mean(source_id)?;
        let z: f64 = StandardNormal.sample(rng);
        Ok(mean + z)
    }

    /// Deterministic noise for a test input: the seed is a hash of the
    /// coordinates XORed with the run seed, so equal inputs get equal sets.
    pub fn noise_for_input(
        &self,
        x: &[f64],
        run_seed: u64,
        source_id: Option<usize>,
    ) -> Result<(f64, u64)> {
        let seed = hash_coordinates(x) ^ run_seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = self.draw_noise(&mut rng, source_id)?;
        Ok((eps, seed))
    }

    /// Conditioner coordinate fed to the label branch.
    pub fn conditioner(&self, x: &[f64], eps: Option<f64>) -> Result<Option<f64>> {
        match self.variant {
            BnfVariant::Plain => Ok(None),
            BnfVariant::Augmented | BnfVariant::AugmentConditioned => {
                let e = eps.ok_or(Error::MissingVariantInput("noise eps"))?;
                Ok(Some(e))
            }
            BnfVariant::FeatureConditioned => {
                self.check_feature_dim(x)?;
                let proj = self.projection.as_ref().expect("variant invariant");
                Ok(Some(crate::neural::dot(proj, x)))
            }
        }
    }

    /// Feature-branch transform alone.
    pub fn transform_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.lifted_x(x)?;
        let mut scratch = CouplingScratch::default();
        self.x_branch.forward_in_place(&mut z, &mut scratch)?;
        Ok(z)
    }

    /// Label-branch transform at a fixed conditioner value.
    pub fn transform_y(&self, y: f64, cond: Option<f64>) -> Result<f64> {
        match &self.y_branch {
            YBranch::Planar(flow) => Ok(flow.forward(y)),
            YBranch::Coupling(stack) => {
                let c = cond.ok_or(Error::MissingVariantInput(
                    "a conditioner value for the coupling label branch",
                ))?;
                let mut z = [y, c];
                let mut scratch = CouplingScratch::default();
                stack.forward_in_place(&mut z, &mut scratch)?;
                Ok(z[0])
            }
        }
    }

    /// Full branched transform of one sample.
    pub fn transform(
        &self,
        x: &[f64],
        y: f64,
        eps: Option<f64>,
        _source_id: Option<usize>,
    ) -> Result<(Vec<f64>, f64)> {
        let x_bar = self.transform_x(x)?;
        let cond = self.conditioner(x, eps)?;
        let y_bar = self.transform_y(y, cond)?;
        Ok((x_bar, y_bar))
    }

    /// Preimage of a transformed label.
    ///
    /// The plain variant inverts analytically (bisection on the monotone
    /// branch). Coupling variants solve the 1-D root-finding problem at the
    /// given conditioner value by scanning for a sign change and bisecting.
    pub fn invert_y(&self, y_bar: f64, cond: Option<f64>) -> Result<f64> {
        match &self.y_branch {
            YBranch::Planar(flow) => flow.invert(y_bar),
            YBranch::Coupling(_) => {
                let c = cond.ok_or(Error::MissingVariantInput(
                    "a conditioner value for the coupling label branch",
                ))?;
                let g = |y: f64| -> Result<f64> { Ok(self.transform_y(y, Some(c))? - y_bar) };
                let mut half_range = 1e3;
                for _ in 0..3 {
                    if let Some(root) = self.scan_root(&g, half_range)? {
                        return Ok(root);
                    }
                    half_range *= 8.0;
                }
                Err(Error::OutOfRange {
                    value: y_bar,
                    lo: -half_range,
                    hi: half_range,
                })
            }
        }
    }

    fn scan_root(&self, g: &dyn Fn(f64) -> Result<f64>, half: f64) -> Result<Option<f64>> {
        const POINTS: usize = 4096;
        let step = 2.0 * half / POINTS as f64;
        let mut prev_y = -half;
        let mut prev_v = g(prev_y)?;
        for k in 1..=POINTS {
            let y = -half + step * k as f64;
            let v = g(y)?;
            if prev_v == 0.0 {
                return Ok(Some(prev_y));
            }
            if prev_v * v < 0.0 {
                // bisect
                let (mut lo, mut hi) = (prev_y, y);
                let (mut lo_v, _) = (prev_v, v);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let mv = g(mid)?;
                    if mv == 0.0 {
                        return Ok(Some(mid));
                    }
                    if lo_v * mv < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        lo_v = mv;
                    }
                    if hi - lo < 1e-12 * (1.0 + mid.abs()) {
                        break;
                    }
                }
                let root = 0.5 * (lo + hi);
                if g(root)?.abs() <= 1e-6 {
                    return Ok(Some(root));
                }
            }
            prev_y = y;
            prev_v = v;
        }
        Ok(None)
    }
}

use rand::SeedableRng;
