//! Minimal dense networks with reverse-mode gradients.
//!
//! Everything here is 64-bit: the gradient checks elsewhere in the crate run
//! at tolerances that 32-bit arithmetic cannot meet. Forward and backward are
//! pure functions of their inputs; optimizer steps mutate state and must be
//! serialized by the caller.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonlinearity applied to hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HiddenActivation {
    /// max(z, 0.01 z)
    LeakyRelu,
    Tanh,
}

/// Nonlinearity applied to the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

const LEAKY_SLOPE: f64 = 0.01;

#[inline]
fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn leaky_prime(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Unrolled dot product; the flow subnetworks make this the hottest loop in
/// the crate.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in (4 * chunks)..a.len() {
        tail += a[j] * b[j];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// A dense feed-forward network.
///
/// Weights are row-major `(out, in)` per layer, stored flat. Hidden layers all
/// share one activation; the last layer gets its own.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
}

/// Per-parameter gradients mirroring an [`Mlp`], plus the gradient with
/// respect to the network input.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub weight_grads: Vec<Vec<f64>>,
    pub bias_grads: Vec<Vec<f64>>,
    pub input_grad: Vec<f64>,
}

impl GradientTape {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        GradientTape {
            weight_grads: mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            bias_grads: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            input_grad: vec![0.0; mlp.input_dim()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self
            .weight_grads
            .iter_mut()
            .chain(self.bias_grads.iter_mut())
        {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
        for v in self.input_grad.iter_mut() {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight_grads
            .iter()
            .chain(self.bias_grads.iter())
            .all(|g| g.iter().all(|v| v.is_finite()))
            && self.input_grad.iter().all(|v| v.is_finite())
    }

    /// Flattens parameter gradients in the same order as [`Mlp::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weight_grads.iter().zip(self.bias_grads.iter()) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Intermediate activations of one forward pass, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations per layer (last entry is the network output).
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("cache of a layered net")
    }
}

impl Mlp {
    /// Builds a seeded network. Weights are uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new(
        layer_sizes: &[usize],
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidParameter(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidParameter(
                "layer sizes must be positive".into(),
            ));
        }
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for win in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    /// Builds a network from explicit parameters (mostly for tests and
    /// deserialization).
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || weights.len() != layer_sizes.len() - 1 {
            return Err(Error::InvalidParameter("layer count mismatch".into()));
        }
        for (i, win) in layer_sizes.windows(2).enumerate() {
            if weights[i].len() != win[0] * win[1] || biases[i].len() != win[1] {
                return Err(Error::DimensionMismatch {
                    expected: win[0] * win[1],
                    got: weights[i].len(),
                    context: "weight matrix shape",
                });
            }
        }
        let finite = weights
            .iter()
            .chain(biases.iter())
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite("MLP parameters".into()));
        }
        Ok(Mlp {
            layer_sizes,
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    /// Zeroes the final layer, making the network output identically zero
    /// regardless of the other parameters. Coupling layers start from this so
    /// a freshly built flow is the identity map.
    pub fn zero_output_layer(&mut self) {
        if let Some(w) = self.weights.last_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(b) = self.biases.last_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
                context: "MLP input",
            });
        }
        Ok(())
    }

    #[inline]
    fn activate(&self, layer: usize, z: f64) -> f64 {
        if layer + 2 == self.layer_sizes.len() {
            match self.output_activation {
                OutputActivation::Identity => z,
                OutputActivation::Tanh => z.tanh(),
            }
        } else {
            match self.hidden_activation {
                HiddenActivation::LeakyRelu => leaky(z),
                HiddenActivation::Tanh => z.tanh(),
            }
        }
    }

    #[inline]
    fn activate_prime(&self, layer: usize, z: f64) -> f64 {
        if layer + 2 == self.layer_sizes.len() {
            match self.output_activation {
                OutputActivation::Identity => 1.0,
                OutputActivation::Tanh => {
                    let t = z.tanh();
                    1.0 - t * t
                }
            }
        } else {
            match self.hidden_activation {
                HiddenActivation::LeakyRelu => leaky_prime(z),
                HiddenActivation::Tanh => {
                    let t = z.tanh();
                    1.0 - t * t
                }
            }
        }
    }

    #[inline]
    fn layer_pass(&self, l: usize, src: &[f64], dst: &mut [f64]) {
        let in_dim = self.layer_sizes[l];
        let w = &self.weights[l];
        let b = &self.biases[l];
        for (j, d) in dst.iter_mut().enumerate() {
            let z = dot(&w[j * in_dim..(j + 1) * in_dim], src) + b[j];
            *d = self.activate(l, z);
        }
    }

    /// Forward pass into a caller-provided output buffer, using `scratch`
    /// for hidden activations. Avoids all allocation on the hot path.
    pub fn forward_into(&self, input: &[f64], scratch: &mut Scratch, out: &mut [f64]) -> Result<()> {
        self.check_input(input)?;
        if out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: out.len(),
                context: "MLP output buffer",
            });
        }
        scratch.ensure(self.max_width());
        let Scratch { a, b } = scratch;
        let n_layers = self.weights.len();
        // Layers ping-pong between the two scratch buffers; even layers write
        // `a`, odd layers write `b`, the last layer writes `out`.
        for l in 0..n_layers {
            let in_dim = self.layer_sizes[l];
            let out_dim = self.layer_sizes[l + 1];
            if l + 1 == n_layers {
                let src: &[f64] = if l == 0 {
                    input
                } else if l % 2 == 1 {
                    &a[..in_dim]
                } else {
                    &b[..in_dim]
                };
                self.layer_pass(l, src, out);
            } else if l % 2 == 0 {
                let src: &[f64] = if l == 0 { input } else { &b[..in_dim] };
                self.layer_pass(l, src, &mut a[..out_dim]);
            } else {
                self.layer_pass(l, &a[..in_dim], &mut b[..out_dim]);
            }
        }
        Ok(())
    }

    /// Convenience forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = Scratch::default();
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(input, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Forward pass that keeps pre/post activations for a later backward pass.
    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        self.check_input(input)?;
        let n_layers = self.weights.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers);
        let mut cur = input.to_vec();
        for l in 0..n_layers {
            let out_dim = self.layer_sizes[l + 1];
            let in_dim = self.layer_sizes[l];
            let w = &self.weights[l];
            let b = &self.biases[l];
            let mut z = vec![0.0; out_dim];
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = dot(&w[j * in_dim..(j + 1) * in_dim], &cur) + b[j];
            }
            let a: Vec<f64> = z.iter().map(|&v| self.activate(l, v)).collect();
            cur = a.clone();
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache { pre, post })
    }

    /// Reverse-mode pass. Returns gradients of `upstream · output` with
    /// respect to every parameter and to the input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<GradientTape> {
        let cache = self.forward_cached(input)?;
        let mut tape = GradientTape::zeros_like(self);
        self.backward_cached_into(input, &cache, upstream, &mut tape)?;
        Ok(tape)
    }

    /// Same as [`Mlp::backward`] but accumulates into an existing tape, reusing
    /// a forward cache. Used by training loops that sum gradients over rows.
    pub fn backward_cached_into(
        &self,
        input: &[f64],
        cache: &ForwardCache,
        upstream: &[f64],
        tape: &mut GradientTape,
    ) -> Result<()> {
        self.check_input(input)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
                context: "upstream gradient",
            });
        }
        let n_layers = self.weights.len();
        // delta for the last layer
        let mut delta: Vec<f64> = cache.pre[n_layers - 1]
            .iter()
            .zip(upstream.iter())
            .map(|(&z, &g)| g * self.activate_prime(n_layers - 1, z))
            .collect();
        for l in (0..n_layers).rev() {
            let in_dim = self.layer_sizes[l];
            let inputs: &[f64] = if l == 0 { input } else { &cache.post[l - 1] };
            {
                let wg = &mut tape.weight_grads[l];
                let bg = &mut tape.bias_grads[l];
                for (j, &dj) in delta.iter().enumerate() {
                    if dj != 0.0 {
                        let row = &mut wg[j * in_dim..(j + 1) * in_dim];
                        for (r, &x) in row.iter_mut().zip(inputs.iter()) {
                            *r += dj * x;
                        }
                    }
                    bg[j] += dj;
                }
            }
            // propagate to the previous layer (or to the input)
            let w = &self.weights[l];
            let mut prev = vec![0.0; in_dim];
            for (j, &dj) in delta.iter().enumerate() {
                if dj != 0.0 {
                    let row = &w[j * in_dim..(j + 1) * in_dim];
                    for (p, &wv) in prev.iter_mut().zip(row.iter()) {
                        *p += dj * wv;
                    }
                }
            }
            if l == 0 {
                for (t, p) in tape.input_grad.iter_mut().zip(prev.iter()) {
                    *t += p;
                }
            } else {
                for (d, z) in prev.iter_mut().zip(cache.pre[l - 1].iter()) {
                    *d *= self.activate_prime(l - 1, *z);
                }
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn max_width(&self) -> usize {
        *self.layer_sizes.iter().max().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Flat parameter vector: `[w0, b0, w1, b1, ...]`, each block row-major.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Writes a flat parameter vector back (inverse of [`Mlp::flat_params`]).
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
                context: "flat parameter vector",
            });
        }
        let mut idx = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wl = w.len();
            w.copy_from_slice(&flat[idx..idx + wl]);
            idx += wl;
            let bl = b.len();
            b.copy_from_slice(&flat[idx..idx + bl]);
            idx += bl;
        }
        Ok(())
    }

    /// Applies one optimizer step from a gradient tape.
    pub fn adam_step(&mut self, tape: &GradientTape, state: &mut AdamState) -> Result<()> {
        let grads = tape.flat();
        let mut params = self.flat_params();
        state.step(&mut params, &grads)?;
        self.set_flat_params(&params)
    }
}

/// Reusable hidden-activation buffers for [`Mlp::forward_into`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Scratch {
    fn ensure(&mut self, width: usize) {
        if self.a.len() < width {
            self.a.resize(width, 0.0);
            self.b.resize(width, 0.0);
        }
    }
}

/// Pinball (quantile) loss and its gradient with respect to the prediction.
///
/// At `target == prediction` the loss is zero and the gradient takes the left
/// value `1 - level`; any subgradient is valid, one is fixed for determinism.
pub fn pinball_loss(prediction: f64, target: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    if target - prediction > 0.0 {
        Ok((level * (target - prediction), -level))
    } else {
        Ok(((1.0 - level) * (prediction - target), 1.0 - level))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Adam optimizer state over one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients without
    /// touching the parameters.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.first_moment.len(),
                got: grads.len(),
                context: "optimizer parameter/gradient shapes",
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to optimizer".into()));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            self.second_moment[i] = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn affine_1x1(w: f64, b: f64) -> Mlp {
        Mlp::from_parts(
            vec![1, 1],
            vec![vec![w]],
            vec![vec![b]],
            HiddenActivation::LeakyRelu,
            OutputActivation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn forward_zero_network_annihilates() {
        let mlp = Mlp::from_parts(
            vec![2, 3, 2],
            vec![vec![0.0; 6], vec![0.0; 6]],
            vec![vec![0.0; 3], vec![0.0; 2]],
            HiddenActivation::LeakyRelu,
            OutputActivation::Identity,
        )
        .unwrap();
        let out = mlp.forward(&[1.5, -2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_identity_single_layer() {
        let mlp = Mlp::from_parts(
            vec![2, 2],
            vec![vec![1.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0]],
            HiddenActivation::LeakyRelu,
            OutputActivation::Identity,
        )
        .unwrap();
        let out = mlp.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn forward_affine_hand_value() {
        // y = 2x + 1 at x = 3
        let mlp = affine_1x1(2.0, 1.0);
        let out = mlp.forward(&[3.0]).unwrap();
        assert!((out[0] - 7.0).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let mlp = affine_1x1(2.0, 1.0);
        assert!(matches!(
            mlp.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn backward_affine_hand_gradients() {
        // y = 2x + 1, input 3, upstream 1: dw = 3, db = 1, dx = 2
        let mlp = affine_1x1(2.0, 1.0);
        let tape = mlp.backward(&[3.0], &[1.0]).unwrap();
        assert!((tape.weight_grads[0][0] - 3.0).abs() < 1e-15);
        assert!((tape.bias_grads[0][0] - 1.0).abs() < 1e-15);
        assert!((tape.input_grad[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn backward_zero_upstream_zero_tape() {
        let mlp = Mlp::new(
            &[3, 5, 2],
            HiddenActivation::Tanh,
            OutputActivation::Identity,
            &mut rng(1),
        )
        .unwrap();
        let tape = mlp.backward(&[0.3, -0.2, 0.9], &[0.0, 0.0]).unwrap();
        assert!(tape.flat().iter().all(|&g| g == 0.0));
        assert!(tape.input_grad.iter().all(|&g| g == 0.0));
    }

    /// Central finite differences on a scalar function of the flat parameters.
    fn finite_diff_params(mlp: &Mlp, input: &[f64], upstream: &[f64]) -> Vec<f64> {
        let h = 1e-4;
        let base = mlp.flat_params();
        let mut grads = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut plus = mlp.clone();
            let mut minus = mlp.clone();
            let mut p = base.clone();
            p[i] += h;
            plus.set_flat_params(&p).unwrap();
            p[i] -= 2.0 * h;
            minus.set_flat_params(&p).unwrap();
            let f_plus: f64 = plus
                .forward(input)
                .unwrap()
                .iter()
                .zip(upstream)
                .map(|(o, u)| o * u)
                .sum();
            let f_minus: f64 = minus
                .forward(input)
                .unwrap()
                .iter()
                .zip(upstream)
                .map(|(o, u)| o * u)
                .sum();
            grads[i] = (f_plus - f_minus) / (2.0 * h);
        }
        grads
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(42);
        for trial in 0..8 {
            let sizes: Vec<usize> = match trial % 4 {
                0 => vec![2, 4, 1],
                1 => vec![3, 5, 3, 2],
                2 => vec![1, 8, 1],
                _ => vec![4, 4, 4],
            };
            let hidden = if trial % 2 == 0 {
                HiddenActivation::Tanh
            } else {
                HiddenActivation::LeakyRelu
            };
            let out_act = if trial % 3 == 0 {
                OutputActivation::Tanh
            } else {
                OutputActivation::Identity
            };
            let mlp = Mlp::new(&sizes, hidden, out_act, &mut r).unwrap();
            let input: Vec<f64> = (0..sizes[0]).map(|_| r.gen_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..*sizes.last().unwrap())
                .map(|_| r.gen_range(-1.0..1.0))
                .collect();
            let tape = mlp.backward(&input, &upstream).unwrap();
            let analytic = tape.flat();
            let numeric = finite_diff_params(&mlp, &input, &upstream);
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < 1e-4,
                    "grad mismatch: analytic {a}, numeric {n}"
                );
            }
            // input gradient too
            let h = 1e-4;
            for i in 0..input.len() {
                let mut xp = input.clone();
                let mut xm = input.clone();
                xp[i] += h;
                xm[i] -= h;
                let fp: f64 = mlp
                    .forward(&xp)
                    .unwrap()
                    .iter()
                    .zip(&upstream)
                    .map(|(o, u)| o * u)
                    .sum();
                let fm: f64 = mlp
                    .forward(&xm)
                    .unwrap()
                    .iter()
                    .zip(&upstream)
                    .map(|(o, u)| o * u)
                    .sum();
                let n = (fp - fm) / (2.0 * h);
                let a = tape.input_grad[i];
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let mlp = Mlp::new(
            &[3, 6, 2],
            HiddenActivation::LeakyRelu,
            OutputActivation::Tanh,
            &mut rng(7),
        )
        .unwrap();
        let x = [0.1, -0.5, 2.0];
        let a = mlp.forward(&x).unwrap();
        let b = mlp.forward(&x).unwrap();
        assert_eq!(a, b, "identical inputs must give bit-identical outputs");
    }

    #[test]
    fn pinball_hand_values() {
        // Appendix-style hand evaluations.
        let (l, _) = pinball_loss(0.0, 1.0, 0.9).unwrap();
        assert!((l - 0.9).abs() < 1e-15);
        let (l, _) = pinball_loss(1.0, 0.0, 0.9).unwrap();
        assert!((l - 0.1).abs() < 1e-15);
        let (l, g) = pinball_loss(0.5, 0.5, 0.3).unwrap();
        assert_eq!(l, 0.0);
        assert!((g - 0.7).abs() < 1e-15, "left-value subgradient at the kink");
    }

    #[test]
    fn pinball_rejects_bad_level() {
        assert!(pinball_loss(0.0, 1.0, 0.0).is_err());
        assert!(pinball_loss(0.0, 1.0, 1.0).is_err());
        assert!(pinball_loss(0.0, 1.0, -0.2).is_err());
    }

    #[test]
    fn pinball_nonnegative_zero_iff_equal_and_convex() {
        let mut r = rng(3);
        for _ in 0..200 {
            let p = r.gen_range(-5.0..5.0);
            let t = r.gen_range(-5.0..5.0);
            let level = r.gen_range(0.05..0.95);
            let (l, _) = pinball_loss(p, t, level).unwrap();
            assert!(l >= 0.0);
            if (p - t).abs() > 1e-12 {
                assert!(l > 0.0);
            }
            // midpoint convexity in the prediction argument
            let p2 = r.gen_range(-5.0..5.0);
            let (l2, _) = pinball_loss(p2, t, level).unwrap();
            let (lm, _) = pinball_loss(0.5 * (p + p2), t, level).unwrap();
            assert!(lm <= 0.5 * (l + l2) + 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3, AdamConfig::default());
        state.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias-corrected Adam moves by -lr * sign(g) on the first step.
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, AdamConfig::with_lr(0.1));
        state.step(&mut params, &[1.0]).unwrap();
        assert!((params[0] + 0.1).abs() < 1e-6, "got {}", params[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = vec![1.0];
        let mut state = AdamState::new(1, AdamConfig::default());
        let err = state.step(&mut params, &[f64::NAN]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(params, vec![1.0], "rejected step must not touch params");
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(p) = 0.5 * (p - 3)^2, gradient p - 3
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, AdamConfig::with_lr(0.05));
        let mut grad = 0.0;
        for _ in 0..5000 {
            grad = params[0] - 3.0;
            state.step(&mut params, &[grad]).unwrap();
            if grad.abs() < 1e-7 {
                break;
            }
        }
        assert!(grad.abs() < 1e-6, "gradient stayed at {grad}");
    }

    #[test]
    fn flat_params_round_trip() {
        let mut r = rng(11);
        let mlp = Mlp::new(
            &[3, 4, 2],
            HiddenActivation::Tanh,
            OutputActivation::Identity,
            &mut r,
        )
        .unwrap();
        let flat = mlp.flat_params();
        let mut other = Mlp::new(
            &[3, 4, 2],
            HiddenActivation::Tanh,
            OutputActivation::Identity,
            &mut r,
        )
        .unwrap();
        other.set_flat_params(&flat).unwrap();
        let x = [0.2, 0.4, -0.6];
        assert_eq!(mlp.forward(&x).unwrap(), other.forward(&x).unwrap());
    }
}
